// Temporary multiplicative-channel probe; removed before release.
use l96_stoch::autodiff::{ParamLayout, ParamVector};
use l96_stoch::dataset::{self, DT_STORE};
use l96_stoch::linalg;
use l96_stoch::models::{CoupledOuModel, OuForm};
use l96_stoch::trainer::{self, AdamState, SegmentNoise};
use l96_stoch::{pod, rng};
use rand::Rng;
use std::path::Path;

fn main() {
    let ds = dataset::load(Path::new("/tmp/c4_12345.l96")).unwrap();
    let p = ds.params;
    let (train_ds, _) = dataset::split_train_val(&ds).unwrap();
    let u = dataset::measure_subgrid_tendency(&train_ds).unwrap();
    let basis = pod::compute_pod(&u).unwrap();

    // mode-projection magnitudes over the data
    let mut proj2 = vec![0.0; p.k];
    for snap in train_ds.snapshots.iter().step_by(100) {
        for (i, mode) in basis.modes.iter().enumerate() {
            let pr = linalg::dot(mode, snap);
            proj2[i] += pr * pr;
        }
    }
    let n = train_ds.snapshots.iter().step_by(100).count() as f64;
    for v in proj2.iter_mut() {
        *v /= n;
    }
    println!("mean (xi_i . X)^2 per mode: {:?}", proj2.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>());

    // watch the multiplicative training channel at nt = 2
    let mut model = CoupledOuModel::untrained(basis.modes.clone(), true).unwrap();
    let mut theta = ParamVector::from_model(&model);
    let layout = ParamLayout::for_model(&model);
    let mut adam = AdamState::new(theta.data.len());
    let (n_t, n_b, members, lr) = (2usize, 200usize, 20usize, 1e-4);
    for batch in 0..1000u64 {
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
        if batch % 100 == 0 || batch == 999 {
            if let OuForm::Multiplicative { a, b } = &model.form {
                let bd: f64 = (0..p.k).map(|i| model.b_mat[i * p.k + i]).sum::<f64>() / 8.0;
                println!(
                    "batch {batch:4}: loss {loss:.4} a_mean {:.3} b_mean {:+.4} Bdiag {bd:.3} mu0 {:+.4}",
                    a.iter().sum::<f64>() / 8.0,
                    b.iter().sum::<f64>() / 8.0,
                    model.mu[0]
                );
            }
        }
    }
}
