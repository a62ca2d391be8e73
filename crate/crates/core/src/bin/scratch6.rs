// Temporary training-path diagnostic; removed before release.
use l96_stoch::autodiff::{ParamLayout, ParamVector};
use l96_stoch::dataset::{self, DT_STORE};
use l96_stoch::eval::{self, ForecastConfig};
use l96_stoch::models::{CoupledOuModel, StochasticModel};
use l96_stoch::trainer::{self, AdamState, SegmentNoise};
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

    let mut model = CoupledOuModel::untrained(basis.modes.clone(), false).unwrap();
    let mut theta = ParamVector::from_model(&model);
    let layout = ParamLayout::for_model(&model);
    let mut adam = AdamState::new(theta.data.len());
    let (n_t, n_b, members, lr) = (8usize, 50usize, 20usize, 1e-2);
    let fc = ForecastConfig {
        members: 20,
        horizon_mtu: 1.0,
        n_initial_conditions: 20,
        ic_spacing_mtu: 10.0,
        perturbation: None,
        seed: 5,
    };

    println!("batch | loss | Adiag Bdiag sigma_r | crps@1 spread@0.5");
    for batch in 0..1500u64 {
        let mut srng = rng::stream(42, &[rng::tag::TRAIN, 100, 0, batch]);
        let starts: Vec<usize> = (0..n_b)
            .map(|_| srng.gen_range(0..=train_ds.snapshots.len() - n_t - 1))
            .collect();
        let segments: Vec<Vec<&[f64]>> = starts
            .iter()
            .map(|&s| train_ds.snapshots[s..s + n_t + 1].iter().map(Vec::as_slice).collect())
            .collect();
        let noises: Vec<SegmentNoise> = (0..n_b)
            .map(|e| SegmentNoise::generate(42, &[rng::tag::TRAIN, 101, 0, batch, e as u64], members, n_t, p.k))
            .collect();
        let (loss, grad) =
            trainer::batch_loss_and_gradient(&model, &theta, &p, &segments, &noises, DT_STORE, 1.0)
                .unwrap();
        trainer::adam_step(&mut theta.data, &grad.data, &mut adam, lr);
        theta.apply_to(&mut model).unwrap();
        if [10, 25, 50, 100, 150, 200, 300, 500, 750, 1000, 1499].contains(&batch) {
            let ad: f64 = (0..p.k).map(|i| model.a_mat[i * p.k + i]).sum::<f64>() / 8.0;
            let bd: f64 = (0..p.k).map(|i| model.b_mat[i * p.k + i]).sum::<f64>() / 8.0;
            let sigma_r = bd * DT_STORE.sqrt() / (2.0 * ad - ad * ad).max(1e-12).sqrt();
            let series =
                eval::forecast_metrics(&StochasticModel::CoupledOu(model.clone()), &eval_ds, &fc)
                    .unwrap();
            println!(
                "{batch:5} | {loss:.4} | {ad:+.4} {bd:.3} {sigma_r:.4} | {:.3} {:>7.2} | mu6 {:+.4}",
                series.crps[200], series.spread[100], model.mu[6]
            );
        }
        let _ = layout;
    }
}
