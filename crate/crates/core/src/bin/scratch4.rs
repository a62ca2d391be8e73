// Temporary criteria 8/9/10 rehearsal; removed before release.
use l96_stoch::dataset::{self, DT_STORE};
use l96_stoch::dynamics::L96Params;
use l96_stoch::eval::{self, ClimateHistogram, ForecastConfig};
use l96_stoch::models;
use l96_stoch::trainer::{self, TrainConfig, TrainForm};
use std::path::Path;
use std::time::Instant;

fn cached(path: &str, seed: u64, production: f64) -> dataset::TruthDataset {
    let p = Path::new(path);
    if p.exists() {
        return dataset::load(p).unwrap();
    }
    let ds = dataset::generate_truth(&L96Params::case_c4(), seed, 1500.0, production).unwrap();
    dataset::save(&ds, p).unwrap();
    ds
}

fn crps_at(series: &eval::MetricSeries, lead: f64) -> f64 {
    series
        .lead_mtu
        .iter()
        .position(|&l| (l - lead).abs() < 1e-9)
        .map(|i| series.crps[i])
        .unwrap_or(f64::NAN)
}

fn spread_at(series: &eval::MetricSeries, lead: f64) -> f64 {
    series
        .lead_mtu
        .iter()
        .position(|&l| (l - lead).abs() < 1e-9)
        .map(|i| series.spread[i])
        .unwrap_or(f64::NAN)
}

fn main() {
    let which: String = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let ds = cached("/tmp/c4_12345.l96", 12345, 500.0);
    let eval_ds = cached("/tmp/c4_eval_777.l96", 10777, 250.0);
    let (train_ds, _) = dataset::split_train_val(&ds).unwrap();
    let fits = models::fit_baselines(&train_ds).unwrap();

    if which == "all" || which == "c9" {
        // ---- criterion 9 rehearsal: crps_ou8 vs svd_gauss vs poly_ou
        let t0 = Instant::now();
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
        let crps_ou8 = trainer::train(&cfg, &ds).unwrap().final_model;
        println!("trained crps_ou8 in {:?}", t0.elapsed());
        let fc = ForecastConfig {
            members: 20,
            horizon_mtu: 2.0,
            n_initial_conditions: 20,
            ic_spacing_mtu: 10.0,
            perturbation: None,
            seed: 5,
        };
        for (name, model) in [
            ("crps_ou8", &crps_ou8),
            ("svd_gauss", &fits.svd_gauss),
            ("poly_ou", &fits.poly_ou),
            ("poly_gauss", &fits.poly_gauss),
            ("svd_ou", &fits.svd_ou),
        ] {
            let t1 = Instant::now();
            let series = eval::forecast_metrics(model, &eval_ds, &fc).unwrap();
            println!(
                "  {name:10}: crps@1MTU {:.4} mse@1MTU {:.3} spread@0.5 {:.4} ({:?})",
                crps_at(&series, 1.0),
                series.mse[200],
                spread_at(&series, 0.5),
                t1.elapsed()
            );
        }
    }

    if which == "all" || which == "c10" {
        // ---- criterion 10 rehearsal: climates
        let truth_samples = eval::pooled_truth_samples(&ds);
        let edges = ClimateHistogram::reference_edges(&truth_samples, 100).unwrap();
        let truth_hist = ClimateHistogram::from_samples(&truth_samples, &edges).unwrap();

        // split-half self consistency
        let half = truth_samples.len() / 2;
        let h1 = ClimateHistogram::from_samples(&truth_samples[..half], &edges).unwrap();
        let h2 = ClimateHistogram::from_samples(&truth_samples[half..], &edges).unwrap();
        let (ks_half, _) = eval::histogram_distances(&h1, &h2).unwrap();
        println!("truth split-half KS: {ks_half:.4}");

        let t0 = Instant::now();
        let svd_samples =
            eval::climate_run(&fits.svd_gauss, &ds.params, &ds.snapshots[0], 3000.0, 3).unwrap();
        let svd_hist = ClimateHistogram::from_samples(&svd_samples, &edges).unwrap();
        let (ks_svd, h2_svd) = eval::histogram_distances(&svd_hist, &truth_hist).unwrap();
        println!("svd_gauss climate: KS {ks_svd:.4} H2 {h2_svd:.4} ({:?})", t0.elapsed());

        for (label, epochs, batches, nb) in [("60x25 nb12", 60usize, 25usize, 12usize)] {
            let t0 = Instant::now();
            let cfg = TrainConfig {
                form: TrainForm::Additive,
                n_t: 32,
                n_b: nb,
                members: 20,
                epochs,
                batches_per_epoch: batches,
                learning_rate: 1e-2,
                alpha: 1.0,
                seed: 21,
                trainable_init: false,
                checkpoint_dir: None,
            };
            let result = trainer::train(&cfg, &ds).unwrap();
            let sm = result.history.smoothed(50);
            let model = result.final_model;
            let t_train = t0.elapsed();
            let samples =
                eval::climate_run(&model, &ds.params, &ds.snapshots[0], 3000.0, 4).unwrap();
            let hist = ClimateHistogram::from_samples(&samples, &edges).unwrap();
            let (ks, h2v) = eval::histogram_distances(&hist, &truth_hist).unwrap();
            if let models::StochasticModel::CoupledOu(m) = &model {
                let bd: f64 = (0..8).map(|i| m.b_mat[i * 8 + i]).sum::<f64>() / 8.0;
                let ad: f64 = (0..8).map(|i| m.a_mat[i * 8 + i]).sum::<f64>() / 8.0;
                println!(
                    "crps_ou32 [{label}]: train {t_train:?} loss {:.3}->{:.3}; KS {ks:.4} H2 {h2v:.4}; Adiag {ad:.3} Bdiag {bd:.3}",
                    sm.first().unwrap(),
                    sm.last().unwrap()
                );
            }
        }
    }

    if which == "all" || which == "c8" {
        // ---- criterion 8 rehearsal: alpha sweep on mult nt8
        for alpha in [0.0, 0.5, 1.0] {
            let t0 = Instant::now();
            let cfg = TrainConfig {
                form: TrainForm::Multiplicative,
                n_t: 8,
                n_b: 50,
                members: 20,
                epochs: 40,
                batches_per_epoch: 50,
                learning_rate: 1e-4,
                alpha,
                seed: 77,
                trainable_init: false,
                checkpoint_dir: None,
            };
            let result = trainer::train(&cfg, &ds).unwrap();
            let sm = result.history.smoothed(50);
            let fc = ForecastConfig {
                members: 20,
                horizon_mtu: 0.5,
                n_initial_conditions: 10,
                ic_spacing_mtu: 10.0,
                perturbation: None,
                seed: 5,
            };
            let series = eval::forecast_metrics(&result.final_model, &eval_ds, &fc).unwrap();
            println!(
                "alpha {alpha}: final smoothed {:.4} (init {:.4}), spread@0.5 {:.4} ({:?})",
                sm.last().unwrap(),
                sm.first().unwrap(),
                spread_at(&series, 0.5),
                t0.elapsed()
            );
        }
    }
    let _ = DT_STORE;
}
