//! Command-line driver: truth-data generation, baseline fitting, CRPS
//! trajectory training, ensemble forecasts, climate runs, the alpha sweep,
//! and report aggregation.
//!
//! Thread count is controlled by the RAYON_NUM_THREADS environment variable.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use std::path::{Path, PathBuf};

use l96_stoch::dataset;
use l96_stoch::dynamics::L96Params;
use l96_stoch::eval::{self, ClimateHistogram, ForecastConfig};
use l96_stoch::models;
use l96_stoch::report::{self, ClimateDistance, ForecastEntry};
use l96_stoch::trainer::{self, TrainConfig, TrainForm};

#[derive(Parser)]
#[command(
    name = "l96stoch",
    about = "Stochastic sub-grid parametrization calibration for the two-scale Lorenz '96 system",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Case {
    C4,
    C10,
}

impl Case {
    fn params(self) -> L96Params {
        match self {
            Case::C4 => L96Params::case_c4(),
            Case::C10 => L96Params::case_c10(),
        }
    }

    fn label(self) -> &'static str {
        match self {
            Case::C4 => "c4",
            Case::C10 => "c10",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    Ou,
    Mult,
}

impl From<FormArg> for TrainForm {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Ou => TrainForm::Additive,
            FormArg::Mult => TrainForm::Multiplicative,
        }
    }
}

/// Optional structured config file; command-line flags override its fields.
#[derive(Debug, Default, Deserialize)]
struct FileConfig {
    train: Option<TrainConfig>,
    forecast: Option<ForecastConfig>,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a coarsened truth dataset (spin-up discarded).
    Generate(GenerateArgs),
    /// Fit the four derivative-fitting baseline models on a dataset.
    Fit(FitArgs),
    /// Train a CRPS trajectory-learning model.
    Train(TrainArgs),
    /// Run ensemble forecasts for one or more models and emit metric CSVs.
    Forecast(ForecastArgs),
    /// Long climate run of a model, compared against the truth distribution.
    Climate(ClimateArgs),
    /// Train the multiplicative model across several spread weights.
    AlphaSweep(AlphaSweepArgs),
    /// Aggregate experiment outputs into a merged report.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    case: Case,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = dataset::DEFAULT_SPINUP_MTU)]
    spinup_mtu: f64,
    #[arg(long, default_value_t = dataset::DEFAULT_PRODUCTION_MTU)]
    production_mtu: f64,
    /// Also persist the fast variables (diagnostics only; large files).
    #[arg(long)]
    store_fast: bool,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset container written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Case label stamped into emitted tables (defaults to c<temporal ratio>).
    #[arg(long)]
    case_label: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    form: Option<FormArg>,
    #[arg(long)]
    nt: Option<usize>,
    /// Ensembles per batch (defaults to the preset paired with nt).
    #[arg(long)]
    nb: Option<usize>,
    #[arg(long)]
    members: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batches: Option<usize>,
    /// Learning rate (defaults to the per-form preset).
    #[arg(long)]
    lr: Option<f64>,
    /// Treat the initial noise state as a trainable parameter block.
    #[arg(long)]
    trainable_init: bool,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with a [train] section; flags override.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ForecastArgs {
    /// Evaluation dataset providing initial conditions and verification.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated model container paths; file stems name the models.
    #[arg(long, value_delimiter = ',')]
    models: Vec<PathBuf>,
    #[arg(long)]
    members: Option<usize>,
    #[arg(long)]
    ics: Option<usize>,
    #[arg(long)]
    horizon_mtu: Option<f64>,
    #[arg(long)]
    spacing_mtu: Option<f64>,
    /// Perturb initial conditions by N(0, 0.1 * spread scale).
    #[arg(long)]
    perturbed: bool,
    /// Perturbation variance as a fraction of the spread scale.
    #[arg(long)]
    perturb_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    case_label: Option<String>,
    /// TOML file with a [forecast] section; flags override.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ClimateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Truth dataset anchoring the comparison distribution and bin edges.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 3000.0)]
    mtu: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    case_label: Option<String>,
}

#[derive(Args)]
struct AlphaSweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Spread weights to train, e.g. `0,0.5,1`.
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
    #[arg(long, value_enum, default_value = "mult")]
    form: FormArg,
    #[arg(long, default_value_t = 8)]
    nt: usize,
    #[arg(long)]
    nb: Option<usize>,
    #[arg(long, default_value_t = 20)]
    members: usize,
    #[arg(long)]
    epochs: usize,
    #[arg(long, default_value_t = 125)]
    batches: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: u64,
    /// Optional evaluation dataset; adds forecast CRPS/spread columns.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    eval_members: usize,
    #[arg(long, default_value_t = 20)]
    eval_ics: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory tree holding experiment outputs.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn infer_case_label(p: &L96Params) -> String {
    format!("c{}", p.c as i64)
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string()
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(args) => generate(args),
        Command::Fit(args) => fit(args),
        Command::Train(args) => train(args),
        Command::Forecast(args) => forecast(args),
        Command::Climate(args) => climate(args),
        Command::AlphaSweep(args) => alpha_sweep(args),
        Command::Report(args) => report_cmd(args),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let p = args.case.params();
    let ds = dataset::generate_truth_ext(
        &p,
        args.seed,
        args.spinup_mtu,
        args.production_mtu,
        args.store_fast,
    )?;
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    dataset::save(&ds, &args.out)?;
    println!(
        "wrote {} ({} snapshots, case {})",
        args.out.display(),
        ds.snapshots.len(),
        args.case.label()
    );
    Ok(())
}

fn fit(args: FitArgs) -> Result<()> {
    let ds = dataset::load(&args.data)?;
    let label = args
        .case_label
        .unwrap_or_else(|| infer_case_label(&ds.params));
    let (train_ds, _) = dataset::split_train_val(&ds)?;
    let fits = models::fit_baselines(&train_ds)?;
    std::fs::create_dir_all(&args.out)?;
    for (name, model) in [
        ("poly_gauss", &fits.poly_gauss),
        ("poly_ou", &fits.poly_ou),
        ("svd_gauss", &fits.svd_gauss),
        ("svd_ou", &fits.svd_ou),
    ] {
        models::save(model, &args.out.join(format!("{name}.l96")))?;
    }
    l96_stoch::pod::save(&fits.basis, &args.out.join("pod_basis.l96"))?;

    let summary = serde_json::json!({
        "case": label,
        "poly_coeffs": fits.local.coeffs,
        "residual_s2": fits.ar1.s2,
        "residual_phi": fits.ar1.phi,
        "pod_lambdas": fits.basis.lambdas,
        "pod_autocorr": fits.basis.autocorr,
    });
    std::fs::write(
        args.out.join("fit_summary.json"),
        serde_json::to_string_pretty(&summary)? + "\n",
    )?;
    println!(
        "fitted baselines for {label}: S2 = {:.4}, phi = {:.4}",
        fits.ar1.s2, fits.ar1.phi
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let file = load_file_config(&args.config)?;
    let mut cfg = match file.train {
        Some(cfg) => cfg,
        None => {
            let form: TrainForm = args
                .form
                .map(Into::into)
                .context("--form is required without a config file")?;
            let nt = args.nt.context("--nt is required without a config file")?;
            TrainConfig::preset(form, nt, args.alpha.unwrap_or(1.0), args.seed.unwrap_or(0))?
        }
    };
    if let Some(form) = args.form {
        cfg.form = form.into();
    }
    if let Some(nt) = args.nt {
        cfg.n_t = nt;
        cfg.n_b = args.nb.unwrap_or_else(|| cfg.form.preset_batch_size(nt));
    }
    if let Some(nb) = args.nb {
        cfg.n_b = nb;
    }
    if let Some(m) = args.members {
        cfg.members = m;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batches {
        cfg.batches_per_epoch = b;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if args.trainable_init {
        cfg.trainable_init = true;
    }
    std::fs::create_dir_all(&args.out)?;
    cfg.checkpoint_dir = Some(args.out.clone());
    cfg.validate()?;

    let ds = dataset::load(&args.data)?;
    let result = trainer::train(&cfg, &ds)?;
    models::save(&result.final_model, &args.out.join("final.l96"))?;
    models::save(&result.best_model, &args.out.join("best.l96"))?;
    result.history.write_csv(&args.out.join("loss_history.csv"))?;
    std::fs::write(
        args.out.join("train_config.json"),
        serde_json::to_string_pretty(&cfg)? + "\n",
    )?;
    let smoothed = result.history.smoothed(50);
    println!(
        "trained {} (nt = {}): {} batches, smoothed loss {:.4} -> {:.4}, best val {:?}",
        result.final_model.name(),
        cfg.n_t,
        result.history.batches.len(),
        smoothed.first().copied().unwrap_or(f64::NAN),
        smoothed.last().copied().unwrap_or(f64::NAN),
        result.best_val
    );
    Ok(())
}

fn forecast(args: ForecastArgs) -> Result<()> {
    if args.models.is_empty() {
        bail!("at least one --models path is required");
    }
    let file = load_file_config(&args.config)?;
    let mut cfg = file.forecast.unwrap_or_default();
    if let Some(m) = args.members {
        cfg.members = m;
    }
    if let Some(n) = args.ics {
        cfg.n_initial_conditions = n;
    }
    if let Some(h) = args.horizon_mtu {
        cfg.horizon_mtu = h;
    }
    if let Some(s) = args.spacing_mtu {
        cfg.ic_spacing_mtu = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.perturbed || args.perturb_fraction.is_some() {
        cfg.perturbation = Some(args.perturb_fraction.unwrap_or(0.1));
    }

    let ds = dataset::load(&args.data)?;
    let label = args
        .case_label
        .unwrap_or_else(|| infer_case_label(&ds.params));
    let mut entries = Vec::new();
    for path in &args.models {
        let model = models::load(path)?;
        let series = eval::forecast_metrics(&model, &ds, &cfg)?;
        let crps_1mtu = series
            .lead_mtu
            .iter()
            .position(|&l| (l - 1.0).abs() < 1e-9)
            .map(|i| series.crps[i])
            .unwrap_or(f64::NAN);
        println!("forecast {}: crps(1 MTU) = {crps_1mtu:.4}", model_name(path));
        entries.push(ForecastEntry {
            model: model_name(path),
            case: label.clone(),
            series,
        });
    }
    report::write_forecast_csvs(&args.out, &entries, cfg.members)?;
    println!("wrote metric CSVs to {}", args.out.display());
    Ok(())
}

fn climate(args: ClimateArgs) -> Result<()> {
    let truth = dataset::load(&args.truth)?;
    let label = args
        .case_label
        .unwrap_or_else(|| infer_case_label(&truth.params));
    let model = models::load(&args.model)?;
    let name = model_name(&args.model);
    let truth_samples = eval::pooled_truth_samples(&truth);
    let edges = ClimateHistogram::reference_edges(&truth_samples, args.bins)?;
    let truth_hist = ClimateHistogram::from_samples(&truth_samples, &edges)?;
    let samples = eval::climate_run(
        &model,
        &truth.params,
        &truth.snapshots[0],
        args.mtu,
        args.seed,
    )?;
    let model_hist = ClimateHistogram::from_samples(&samples, &edges)?;
    let (ks, h2) = eval::histogram_distances(&model_hist, &truth_hist)?;
    std::fs::create_dir_all(&args.out)?;
    report::write_climate_distances(
        &args.out.join("climate_distances.json"),
        &[ClimateDistance {
            model: name.clone(),
            case: label.clone(),
            ks,
            hellinger: h2,
        }],
    )?;
    report::write_histograms_csv(
        &args.out.join("climate_histograms.csv"),
        &[("truth".to_string(), truth_hist), (name.clone(), model_hist)],
        &label,
    )?;
    println!("climate {name}: KS = {ks:.4}, Hellinger = {h2:.4}");
    Ok(())
}

fn alpha_sweep(args: AlphaSweepArgs) -> Result<()> {
    if args.alphas.is_empty() {
        bail!("at least one --alphas value is required");
    }
    let ds = dataset::load(&args.data)?;
    let form: TrainForm = args.form.into();
    std::fs::create_dir_all(&args.out)?;
    let eval_ds = args.eval_data.as_deref().map(dataset::load).transpose()?;

    let mut rows = Vec::new();
    for &alpha in &args.alphas {
        let dir = args.out.join(format!("alpha_{alpha}"));
        std::fs::create_dir_all(&dir)?;
        let cfg = TrainConfig {
            form,
            n_t: args.nt,
            n_b: args.nb.unwrap_or_else(|| form.preset_batch_size(args.nt)),
            members: args.members,
            epochs: args.epochs,
            batches_per_epoch: args.batches,
            learning_rate: args.lr.unwrap_or_else(|| form.preset_learning_rate()),
            alpha,
            seed: args.seed,
            trainable_init: false,
            checkpoint_dir: Some(dir.clone()),
        };
        cfg.validate()?;
        let result = trainer::train(&cfg, &ds)?;
        models::save(&result.final_model, &dir.join("final.l96"))?;
        result.history.write_csv(&dir.join("loss_history.csv"))?;
        let smoothed = result.history.smoothed(50);
        let final_loss = smoothed.last().copied().unwrap_or(f64::NAN);

        let (crps_1mtu, spread_half_mtu) = match &eval_ds {
            None => (f64::NAN, f64::NAN),
            Some(ev) => {
                let fc = ForecastConfig {
                    members: args.eval_members,
                    horizon_mtu: 1.0,
                    n_initial_conditions: args.eval_ics,
                    ic_spacing_mtu: 2.0,
                    perturbation: None,
                    seed: args.seed,
                };
                let series = eval::forecast_metrics(&result.final_model, ev, &fc)?;
                let at = |lead: f64, vals: &[f64]| {
                    series
                        .lead_mtu
                        .iter()
                        .position(|&l| (l - lead).abs() < 1e-9)
                        .map(|i| vals[i])
                        .unwrap_or(f64::NAN)
                };
                (at(1.0, &series.crps), at(0.5, &series.spread))
            }
        };
        println!(
            "alpha = {alpha}: final smoothed loss {final_loss:.4}, spread(0.5 MTU) {spread_half_mtu:.4}"
        );
        rows.push((alpha, final_loss, crps_1mtu, spread_half_mtu));
    }

    use std::io::Write;
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(args.out.join("alpha_sweep.csv"))?);
    writeln!(out, "alpha,final_smoothed_loss,crps_1mtu,spread_05mtu")?;
    for (a, l, c, s) in rows {
        writeln!(out, "{a},{l:.12e},{c:.12e},{s:.12e}")?;
    }
    out.flush()?;
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let summary = report::aggregate(&args.input, &args.out)?;
    println!(
        "aggregated {} experiment outputs ({} climate rows) into {}",
        summary.n_experiments,
        summary.climate.len(),
        args.out.display()
    );
    Ok(())
}
