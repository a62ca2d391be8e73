// Temporary loss-landscape probe; removed before release.
use l96_stoch::dataset::{self, DT_STORE};
use l96_stoch::models::{CoupledOuModel, StochasticModel};
use l96_stoch::trainer::{plain_batch_loss, SegmentNoise};
use l96_stoch::{pod, rng};
use rand::Rng;
use std::path::Path;

fn main() {
    let ds = dataset::load(Path::new("/tmp/c4_12345.l96")).unwrap();
    let p = ds.params;
    let (train_ds, _) = dataset::split_train_val(&ds).unwrap();
    let u = dataset::measure_subgrid_tendency(&train_ds).unwrap();
    let basis = pod::compute_pod(&u).unwrap();

    for n_t in [2usize, 8] {
        println!("== n_t = {n_t}: expected batch loss vs noise scale B (A = 0.03, mu = 0)");
        for b_scale in [0.02, 0.05, 0.1, 0.15, 0.2, 0.25, 0.35, 0.5, 0.8, 1.5, 3.0] {
            let mut model = CoupledOuModel::untrained(basis.modes.clone(), false).unwrap();
            for i in 0..p.k {
                model.b_mat[i * p.k + i] = b_scale;
            }
            let sm = StochasticModel::CoupledOu(model);
            let n_batches = 60;
            let n_b = 10;
            let members = 20;
            let mut total = 0.0;
            for batch in 0..n_batches as u64 {
                let mut srng = rng::stream(7, &[1, batch]);
                let starts: Vec<usize> = (0..n_b)
                    .map(|_| srng.gen_range(0..=train_ds.snapshots.len() - n_t - 1))
                    .collect();
                let segments: Vec<Vec<&[f64]>> = starts
                    .iter()
                    .map(|&s| train_ds.snapshots[s..s + n_t + 1].iter().map(Vec::as_slice).collect())
                    .collect();
                let noises: Vec<SegmentNoise> = (0..n_b)
                    .map(|e| SegmentNoise::generate(7, &[2, batch, e as u64], members, n_t, p.k))
                    .collect();
                let (loss, _) =
                    plain_batch_loss(&sm, &p, &segments, &noises, DT_STORE, 1.0).unwrap();
                total += loss;
            }
            println!("   B = {b_scale:>5}: mean loss {:.4}", total / n_batches as f64);
        }
    }
}
