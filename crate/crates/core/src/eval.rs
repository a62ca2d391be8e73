//! Forecast experiments, climate runs, and verification metrics.
//!
//! Short-range skill is measured per lead time by the ensemble MSE, the
//! CRPS (shared with the training objective), and the spread–error pair;
//! long-run behavior by pooled histograms compared through Kolmogorov–
//! Smirnov and Hellinger distances.

use crate::crps;
use crate::dataset::{TruthDataset, DT_STORE};
use crate::dynamics::L96Params;
use crate::error::{Error, Result};
use crate::models::{rollout_model, StochasticModel};
use crate::rng;
use serde::{Deserialize, Serialize};

/// Forecast experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastConfig {
    /// Ensemble size.
    pub members: usize,
    /// Forecast horizon in MTU.
    pub horizon_mtu: f64,
    pub n_initial_conditions: usize,
    /// Spacing between initial conditions in MTU.
    pub ic_spacing_mtu: f64,
    /// Initial-condition perturbation as a fraction of the reference spread
    /// scale; `None` runs perfect initial conditions.
    pub perturbation: Option<f64>,
    pub seed: u64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            members: 50,
            horizon_mtu: 2.0,
            n_initial_conditions: 100,
            ic_spacing_mtu: 10.0,
            perturbation: None,
            seed: 0,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members < 2 {
            return Err(Error::InvalidParam(
                "spread metrics need at least 2 members".into(),
            ));
        }
        if self.n_initial_conditions == 0 || !(self.horizon_mtu > 0.0) || !(self.ic_spacing_mtu > 0.0)
        {
            return Err(Error::InvalidParam("invalid forecast geometry".into()));
        }
        Ok(())
    }
}

/// Ensemble forecast from one initial condition: surviving member
/// trajectories plus the indices of members excluded for divergence.
#[derive(Debug, Clone)]
pub struct EnsembleTrajectory {
    /// `members[i][t]` is the K-vector state of surviving member `i` at step `t`.
    pub members: Vec<Vec<Vec<f64>>>,
    pub diverged: Vec<usize>,
}

/// Integrates `members` independent trajectories of `n_steps` coarse steps.
/// Divergent members are excluded and flagged; more than 20% divergent
/// members abort the experiment.
pub fn ensemble_forecast(
    model: &StochasticModel,
    p: &L96Params,
    ic: &[f64],
    n_steps: usize,
    dt: f64,
    members: usize,
    seed: u64,
    ic_index: u64,
) -> Result<EnsembleTrajectory> {
    let mut out = EnsembleTrajectory {
        members: Vec::with_capacity(members),
        diverged: Vec::new(),
    };
    for m in 0..members {
        let path = [rng::tag::FORECAST, ic_index, m as u64];
        let init = model.init_noise_keyed(seed, &path, dt);
        let res = rollout_model(model, p, ic, init, n_steps, dt, |step| {
            let mut eps = vec![0.0; model.noise_channels()];
            rng::fill_standard_normal(seed, &[path[0], path[1], path[2], step as u64], &mut eps);
            eps
        });
        match res {
            Ok(states) => out.members.push(states),
            Err(Error::Divergence { .. }) => out.diverged.push(m),
            Err(other) => return Err(other),
        }
    }
    if out.diverged.len() * 5 > members {
        return Err(Error::ForecastAborted {
            diverged: out.diverged.len(),
            total: members,
        });
    }
    Ok(out)
}

/// Ensemble mean squared error `(1/M) sum_i (x_i - y)^2`.
pub fn mse(members: &[f64], truth: f64) -> f64 {
    debug_assert!(!members.is_empty());
    members.iter().map(|x| (x - truth) * (x - truth)).sum::<f64>() / members.len() as f64
}

/// Squared ensemble-mean error and ensemble variance (population divisor).
/// Consumers compare the pair after applying the `(1 + 1/M)` and `(1 - 1/M)`
/// factors. Needs at least two members.
pub fn spread_error(members: &[f64], truth: f64) -> (f64, f64) {
    debug_assert!(members.len() >= 2);
    let m = members.len() as f64;
    let mean = members.iter().sum::<f64>() / m;
    let err = (mean - truth) * (mean - truth);
    let var = members.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / m;
    (err, var)
}

/// Per-lead-time verification metrics averaged over variables and initial
/// conditions. All series share the lead-time axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSeries {
    pub lead_mtu: Vec<f64>,
    pub mse: Vec<f64>,
    pub crps: Vec<f64>,
    /// Squared ensemble-mean error.
    pub error: Vec<f64>,
    /// Ensemble variance.
    pub spread: Vec<f64>,
}

/// Runs the forecast experiment for one model: initial conditions are taken
/// from the evaluation dataset at the configured spacing, optionally
/// perturbed (perturbations depend only on the seed and the IC index, so all
/// model configurations see identical perturbed states).
pub fn forecast_metrics(
    model: &StochasticModel,
    eval_ds: &TruthDataset,
    cfg: &ForecastConfig,
) -> Result<MetricSeries> {
    cfg.validate()?;
    let p = eval_ds.params;
    let dt = eval_ds.dt_store;
    let n_steps = (cfg.horizon_mtu / dt).round() as usize;
    let spacing = (cfg.ic_spacing_mtu / dt).round() as usize;
    let needed = (cfg.n_initial_conditions - 1) * spacing + n_steps + 1;
    if eval_ds.snapshots.len() < needed {
        return Err(Error::InvalidParam(format!(
            "evaluation dataset has {} snapshots but the experiment needs {needed}",
            eval_ds.snapshots.len()
        )));
    }
    let scale = crate::dataset::spread_scale(eval_ds);

    let mut acc_mse = vec![0.0; n_steps + 1];
    let mut acc_crps = vec![0.0; n_steps + 1];
    let mut acc_err = vec![0.0; n_steps + 1];
    let mut acc_spread = vec![0.0; n_steps + 1];
    let mut n_terms = vec![0usize; n_steps + 1];

    for ic_idx in 0..cfg.n_initial_conditions {
        let base = ic_idx * spacing;
        let ic_state = match cfg.perturbation {
            None => eval_ds.snapshots[base].clone(),
            Some(fraction) => perturb_ic(
                &eval_ds.snapshots[base],
                scale,
                fraction,
                cfg.seed,
                ic_idx as u64,
            ),
        };
        let ens = ensemble_forecast(
            model,
            &p,
            &ic_state,
            n_steps,
            dt,
            cfg.members,
            cfg.seed,
            ic_idx as u64,
        )?;
        if ens.members.len() < 2 {
            continue;
        }
        let mut slice = vec![0.0; ens.members.len()];
        for t in 0..=n_steps {
            let truth = &eval_ds.snapshots[base + t];
            for var in 0..p.k {
                for (i, member) in ens.members.iter().enumerate() {
                    slice[i] = member[t][var];
                }
                acc_mse[t] += mse(&slice, truth[var]);
                acc_crps[t] += crps::crps(&slice, truth[var]);
                let (e, s) = spread_error(&slice, truth[var]);
                acc_err[t] += e;
                acc_spread[t] += s;
                n_terms[t] += 1;
            }
        }
    }

    let series = |acc: Vec<f64>| -> Vec<f64> {
        acc.iter()
            .zip(&n_terms)
            .map(|(v, &n)| if n > 0 { v / n as f64 } else { f64::NAN })
            .collect()
    };
    Ok(MetricSeries {
        lead_mtu: (0..=n_steps).map(|t| t as f64 * dt).collect(),
        mse: series(acc_mse),
        crps: series(acc_crps),
        error: series(acc_err),
        spread: series(acc_spread),
    })
}

/// Perturbs an initial condition by independent draws from
/// `N(0, fraction * scale)`. Keyed only by the seed and IC index, so every
/// model configuration receives the same perturbation.
pub fn perturb_ic(ic: &[f64], scale: f64, fraction: f64, seed: u64, ic_index: u64) -> Vec<f64> {
    if fraction == 0.0 {
        return ic.to_vec();
    }
    let sigma = (fraction * scale).sqrt();
    let eps = rng::standard_normal_vec(seed, &[rng::tag::PERTURB, ic_index], ic.len());
    ic.iter().zip(eps).map(|(x, e)| x + sigma * e).collect()
}

// ---------------------------------------------------------------------------
// climate

/// Empirical distribution over fixed bin edges. Out-of-range samples fall
/// into the end bins so the density always integrates to one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClimateHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Normalized density per bin.
    pub density: Vec<f64>,
    /// Cumulative distribution at the right edge of each bin.
    pub cdf: Vec<f64>,
}

impl ClimateHistogram {
    /// Uniform edges spanning the sample range of `reference` extended by 5%
    /// on each side.
    pub fn reference_edges(reference: &[f64], bins: usize) -> Result<Vec<f64>> {
        if reference.is_empty() || bins == 0 {
            return Err(Error::InvalidParam("empty reference or zero bins".into()));
        }
        let lo = reference.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            return Err(Error::InvalidParam("degenerate sample range".into()));
        }
        let pad = 0.05 * (hi - lo);
        let (lo, hi) = (lo - pad, hi + pad);
        let w = (hi - lo) / bins as f64;
        Ok((0..=bins).map(|i| lo + i as f64 * w).collect())
    }

    /// Bins samples over uniform edges.
    pub fn from_samples(samples: &[f64], edges: &[f64]) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::InvalidParam("need at least one bin".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidParam("no samples".into()));
        }
        let bins = edges.len() - 1;
        let lo = edges[0];
        let w = (edges[bins] - lo) / bins as f64;
        for (i, pair) in edges.windows(2).enumerate() {
            if ((pair[1] - pair[0]) - w).abs() > 1e-9 * w.abs() {
                return Err(Error::InvalidParam(format!(
                    "bin edges must be uniform (bin {i} has width {})",
                    pair[1] - pair[0]
                )));
            }
        }
        let mut counts = vec![0u64; bins];
        for &v in samples {
            let idx = (((v - lo) / w).floor() as isize).clamp(0, bins as isize - 1) as usize;
            counts[idx] += 1;
        }
        let total = samples.len() as f64;
        let density: Vec<f64> = counts.iter().map(|&c| c as f64 / (total * w)).collect();
        let mut cdf = Vec::with_capacity(bins);
        let mut acc = 0.0;
        for &c in &counts {
            acc += c as f64 / total;
            cdf.push(acc);
        }
        Ok(Self {
            edges: edges.to_vec(),
            counts,
            density,
            cdf,
        })
    }

    pub fn bin_width(&self) -> f64 {
        (self.edges[self.edges.len() - 1] - self.edges[0]) / (self.edges.len() - 1) as f64
    }

    /// Probability mass per bin.
    pub fn masses(&self) -> Vec<f64> {
        let total: u64 = self.counts.iter().sum();
        self.counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect()
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.edges.len() == other.edges.len()
            && self
                .edges
                .iter()
                .zip(&other.edges)
                .all(|(a, b)| (a - b).abs() <= 1e-12 * (1.0 + a.abs()))
    }
}

/// Largest CDF mismatch over a shared grid.
pub fn ks_distance(p_cdf: &[f64], q_cdf: &[f64]) -> Result<f64> {
    if p_cdf.len() != q_cdf.len() {
        return Err(Error::ShapeMismatch("CDF grids differ in length".into()));
    }
    Ok(p_cdf
        .iter()
        .zip(q_cdf)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Hellinger distance `(1/sqrt(2)) sqrt(sum (sqrt(p_i) - sqrt(q_i))^2)` over
/// probability masses on shared bins.
pub fn hellinger(p_mass: &[f64], q_mass: &[f64]) -> Result<f64> {
    if p_mass.len() != q_mass.len() {
        return Err(Error::ShapeMismatch("mass grids differ in length".into()));
    }
    if p_mass.iter().chain(q_mass).any(|&v| v < 0.0) {
        return Err(Error::InvalidParam("negative probability mass".into()));
    }
    let sum: f64 = p_mass
        .iter()
        .zip(q_mass)
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum();
    Ok((sum / 2.0).sqrt())
}

/// Distances between two histograms on the same grid.
pub fn histogram_distances(a: &ClimateHistogram, b: &ClimateHistogram) -> Result<(f64, f64)> {
    if !a.same_grid(b) {
        return Err(Error::ShapeMismatch("histogram grids differ".into()));
    }
    Ok((
        ks_distance(&a.cdf, &b.cdf)?,
        hellinger(&a.masses(), &b.masses())?,
    ))
}

/// Long model run pooling every variable at every step into one sample
/// vector. Aborts with the failing step index on divergence.
pub fn climate_run(
    model: &StochasticModel,
    p: &L96Params,
    ic: &[f64],
    length_mtu: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let dt = DT_STORE;
    let n_steps = (length_mtu / dt).round() as usize;
    let mut samples = Vec::with_capacity(n_steps * p.k);
    let mut noise = model.init_noise_keyed(seed, &[rng::tag::CLIMATE], dt);
    let mut x = ic.to_vec();
    for step in 0..n_steps {
        let mut eps = vec![0.0; model.noise_channels()];
        rng::fill_standard_normal(seed, &[rng::tag::CLIMATE, step as u64], &mut eps);
        x = model.step(p, &x, &mut noise, &eps, dt);
        if !crate::integrators::state_admissible(&x) {
            return Err(Error::Divergence { step: step + 1 });
        }
        samples.extend_from_slice(&x);
    }
    Ok(samples)
}

/// Pools all stored slow variables of a dataset (the truth's climate sample).
pub fn pooled_truth_samples(ds: &TruthDataset) -> Vec<f64> {
    ds.snapshots.iter().flatten().copied().collect()
}
