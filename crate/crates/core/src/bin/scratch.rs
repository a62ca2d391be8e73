// Temporary training/gradient harness; removed before release.
use l96_stoch::autodiff::ParamVector;
use l96_stoch::dataset::{self, DT_STORE};
use l96_stoch::dynamics::L96Params;
use l96_stoch::models::{CoupledOuModel, StochasticModel};
use l96_stoch::trainer::{self, SegmentNoise, TrainConfig, TrainForm};
use l96_stoch::{pod, rng};
use rand::Rng;
use std::path::Path;
use std::time::Instant;

fn cached_c4() -> dataset::TruthDataset {
    let path = Path::new("/tmp/c4_12345.l96");
    if path.exists() {
        return dataset::load(path).unwrap();
    }
    let ds = dataset::generate_truth(&L96Params::case_c4(), 12345, 1500.0, 500.0).unwrap();
    dataset::save(&ds, path).unwrap();
    ds
}

fn main() {
    let ds = cached_c4();
    let p = ds.params;
    let (train_ds, _) = dataset::split_train_val(&ds).unwrap();
    let u = dataset::measure_subgrid_tendency(&train_ds).unwrap();
    let basis = pod::compute_pod(&u).unwrap();

    // ---- gradient check: additive, N_t = 4, M = 8
    let model = CoupledOuModel::untrained(basis.modes.clone(), false).unwrap();
    let theta = ParamVector::from_model(&model);
    let n_t = 4;
    let n_b = 3;
    let mut srng = rng::stream(7, &[rng::tag::GRADCHECK, 1]);
    let starts: Vec<usize> = (0..n_b)
        .map(|_| srng.gen_range(0..train_ds.snapshots.len() - n_t - 1))
        .collect();
    let segments: Vec<Vec<&[f64]>> = starts
        .iter()
        .map(|&s| train_ds.snapshots[s..s + n_t + 1].iter().map(Vec::as_slice).collect())
        .collect();
    let noises: Vec<SegmentNoise> = (0..n_b)
        .map(|e| SegmentNoise::generate(7, &[rng::tag::GRADCHECK, 2, e as u64], 8, n_t, p.k))
        .collect();
    let t0 = Instant::now();
    let (loss, grad) =
        trainer::batch_loss_and_gradient(&model, &theta, &p, &segments, &noises, DT_STORE, 1.0)
            .unwrap();
    println!("gradcheck loss {loss:.6} grad-norm {:.4e} ({:?})",
        grad.data.iter().map(|g| g * g).sum::<f64>().sqrt(), t0.elapsed());
    let mut crng = rng::stream(7, &[rng::tag::GRADCHECK, 3]);
    let coords: Vec<usize> = (0..20).map(|_| crng.gen_range(0..theta.data.len())).collect();
    let f = |th: &[f64]| {
        let mut pv = theta.clone();
        pv.data.copy_from_slice(th);
        let mut m = model.clone();
        pv.apply_to(&mut m).unwrap();
        trainer::plain_batch_loss(
            &StochasticModel::CoupledOu(m),
            &p,
            &segments,
            &noises,
            DT_STORE,
            1.0,
        )
    };
    let check =
        l96_stoch::autodiff::check_gradient(f, &theta.data, &grad.data, &coords, 1e-5).unwrap();
    println!(
        "gradcheck: max rel {:.3e}, checked {}, excluded {}",
        check.max_rel_error,
        check.checked.len(),
        check.excluded.len()
    );

    // ---- additive training smoke, N_t = 8
    let cfg = TrainConfig {
        form: TrainForm::Additive,
        n_t: 8,
        n_b: 50,
        members: 20,
        epochs: 40,
        batches_per_epoch: 25,
        learning_rate: 1e-2,
        alpha: 1.0,
        seed: 42,
        trainable_init: false,
        checkpoint_dir: None,
    };
    let t0 = Instant::now();
    let result = trainer::train(&cfg, &ds).unwrap();
    let el = t0.elapsed();
    let smoothed = result.history.smoothed(50);
    println!(
        "additive nt8: {} batches in {el:?} ({:.1} ms/batch); smoothed first {:.4} last {:.4} ratio {:.3}",
        cfg.epochs * cfg.batches_per_epoch,
        el.as_millis() as f64 / (cfg.epochs * cfg.batches_per_epoch) as f64,
        smoothed.first().unwrap(),
        smoothed.last().unwrap(),
        smoothed.last().unwrap() / smoothed.first().unwrap()
    );
    if let StochasticModel::CoupledOu(m) = &result.final_model {
        println!("  mu[0..4] {:?}", &m.mu[..4]);
    }
    println!("  val: {:?}", &result.history.validation[result.history.validation.len().min(3).saturating_sub(1)..]);

    // ---- multiplicative training smoke, N_t = 2
    let cfg = TrainConfig {
        form: TrainForm::Multiplicative,
        n_t: 2,
        n_b: 200,
        members: 20,
        epochs: 40,
        batches_per_epoch: 200,
        learning_rate: 1e-4,
        alpha: 1.0,
        seed: 42,
        trainable_init: false,
        checkpoint_dir: None,
    };
    let t0 = Instant::now();
    let result = trainer::train(&cfg, &ds).unwrap();
    let el = t0.elapsed();
    let smoothed = result.history.smoothed(50);
    println!(
        "mult nt2: {} batches in {el:?} ({:.1} ms/batch); smoothed first {:.4} last {:.4} ratio {:.3}",
        cfg.epochs * cfg.batches_per_epoch,
        el.as_millis() as f64 / (cfg.epochs * cfg.batches_per_epoch) as f64,
        smoothed.first().unwrap(),
        smoothed.last().unwrap(),
        smoothed.last().unwrap() / smoothed.first().unwrap()
    );
}
