// Temporary additive-OU envelope probe; removed before release.
use l96_stoch::dataset::{self, DT_STORE};
use l96_stoch::eval::{self, ForecastConfig};
use l96_stoch::linalg;
use l96_stoch::models::{CoupledOuModel, StochasticModel};
use l96_stoch::trainer::{plain_batch_loss, SegmentNoise};
use l96_stoch::{pod, rng};
use rand::Rng;
use std::path::Path;

fn main() {
    let ds = dataset::load(Path::new("/tmp/c4_12345.l96")).unwrap();
    let eval_ds = dataset::load(Path::new("/tmp/c4_eval_777.l96")).unwrap();
    let p = ds.params;
    let (train_ds, _) = dataset::split_train_val(&ds).unwrap();
    let u = dataset::measure_subgrid_tendency(&train_ds).unwrap();
    let basis = pod::compute_pod(&u).unwrap();

    // mean sub-grid increment per step, expressed in mode coefficients
    let mut u_mean = vec![0.0; p.k];
    for k in 0..p.k {
        u_mean[k] = linalg::mean(u.row(k)) * DT_STORE;
    }
    let mu_matched: Vec<f64> = basis.modes.iter().map(|m| linalg::dot(m, &u_mean)).collect();
    println!("matched mu: {:?}", mu_matched.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());

    let fc = ForecastConfig {
        members: 20,
        horizon_mtu: 1.0,
        n_initial_conditions: 20,
        ic_spacing_mtu: 10.0,
        perturbation: None,
        seed: 5,
    };
    let n_t = 8;
    let n_b = 10;

    println!("config: A, sigma_r, mu | crps@1MTU spread@0.5 | nt8 window loss");
    for a_diag in [0.005, 0.03] {
        for sigma_r in [0.02, 0.05, 0.1, 0.2, 0.3] {
            for matched in [false, true] {
                let b_diag: f64 =
                    sigma_r * (2.0 * a_diag - a_diag * a_diag as f64).sqrt() / DT_STORE.sqrt();
                let mut model = CoupledOuModel::untrained(basis.modes.clone(), false).unwrap();
                for i in 0..p.k {
                    model.a_mat[i * p.k + i] = a_diag;
                    model.b_mat[i * p.k + i] = b_diag;
                }
                if matched {
                    model.mu.copy_from_slice(&mu_matched);
                }
                let sm = StochasticModel::CoupledOu(model);
                let series = eval::forecast_metrics(&sm, &eval_ds, &fc).unwrap();
                let crps1 = series.crps[200];
                let spread05 = series.spread[100];

                // expected nt8 window loss
                let mut total = 0.0;
                let n_batches = 30;
                for batch in 0..n_batches as u64 {
                    let mut srng = rng::stream(7, &[1, batch]);
                    let starts: Vec<usize> = (0..n_b)
                        .map(|_| srng.gen_range(0..=train_ds.snapshots.len() - n_t - 1))
                        .collect();
                    let segments: Vec<Vec<&[f64]>> = starts
                        .iter()
                        .map(|&s| {
                            train_ds.snapshots[s..s + n_t + 1].iter().map(Vec::as_slice).collect()
                        })
                        .collect();
                    let noises: Vec<SegmentNoise> = (0..n_b)
                        .map(|e| SegmentNoise::generate(7, &[2, batch, e as u64], 20, n_t, p.k))
                        .collect();
                    let (loss, _) =
                        plain_batch_loss(&sm, &p, &segments, &noises, DT_STORE, 1.0).unwrap();
                    total += loss;
                }
                println!(
                    "A {a_diag:<6} sr {sigma_r:<5} mu {} | crps1 {crps1:.3} spread05 {spread05:>7.2} | loss {:.4}",
                    if matched { "yes" } else { "no " },
                    total / n_batches as f64
                );
            }
        }
    }
}
