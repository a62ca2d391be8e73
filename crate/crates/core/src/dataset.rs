//! Truth-data generation, sub-grid tendency measurement, train/validation
//! splitting, and on-disk persistence.
//!
//! The truth system is integrated at dt = 0.001 MTU with SSPRK3; after the
//! spin-up is discarded, the slow variables are stored every 0.005 MTU. Fast
//! variables are not persisted unless the debug flag asks for them.

use crate::container::{self, Kind};
use crate::dynamics::{self, L96Params, SlowState};
use crate::error::{Error, Result};
use crate::integrators::{self, state_admissible};
use crate::{linalg, rng};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const DT_TRUTH: f64 = 0.001;
pub const DT_STORE: f64 = 0.005;
pub const DEFAULT_SPINUP_MTU: f64 = 1500.0;
pub const DEFAULT_PRODUCTION_MTU: f64 = 500.0;

/// Generation metadata carried with a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub spinup_mtu: f64,
    pub production_mtu: f64,
}

/// Coarsened truth data: slow-variable snapshots at a fixed storage interval.
#[derive(Debug, Clone)]
pub struct TruthDataset {
    pub params: L96Params,
    pub dt_store: f64,
    /// Row-major snapshots: `snapshots[t]` is the K-vector at time `t * dt_store`.
    pub snapshots: Vec<Vec<f64>>,
    pub meta: DatasetMeta,
    /// Fast-variable snapshots, present only when generated with the debug flag.
    pub fast: Option<Vec<Vec<f64>>>,
}

/// Sub-grid tendency measurements, shape `(K, n_snapshots - 1)`, stored
/// row-major per variable. Column `t` aligns with snapshot `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TendencyField {
    pub k: usize,
    pub n_times: usize,
    vals: Vec<f64>,
}

impl TendencyField {
    pub fn new(k: usize, n_times: usize, vals: Vec<f64>) -> Result<Self> {
        if vals.len() != k * n_times {
            return Err(Error::ShapeMismatch(format!(
                "tendency field expects {} values, got {}",
                k * n_times,
                vals.len()
            )));
        }
        if !vals.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParam("non-finite tendency entry".into()));
        }
        Ok(Self { k, n_times, vals })
    }

    #[inline]
    pub fn get(&self, k: usize, t: usize) -> f64 {
        self.vals[k * self.n_times + t]
    }

    /// Row of variable `k` over all measurement times.
    pub fn row(&self, k: usize) -> &[f64] {
        &self.vals[k * self.n_times..(k + 1) * self.n_times]
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }
}

/// Integrates the truth system, discards the spin-up, and stores the slow
/// variables every [`DT_STORE`] MTU. The initial condition assigns an
/// independent standard normal sample to every variable.
pub fn generate_truth(
    p: &L96Params,
    seed: u64,
    spinup_mtu: f64,
    production_mtu: f64,
) -> Result<TruthDataset> {
    generate_truth_ext(p, seed, spinup_mtu, production_mtu, false)
}

/// Variant that can also persist the fast variables for diagnostics.
pub fn generate_truth_ext(
    p: &L96Params,
    seed: u64,
    spinup_mtu: f64,
    production_mtu: f64,
    store_fast: bool,
) -> Result<TruthDataset> {
    if spinup_mtu < 0.0 || production_mtu <= 0.0 {
        return Err(Error::InvalidParam(
            "spin-up must be nonnegative and production positive".into(),
        ));
    }
    let store_every = (DT_STORE / DT_TRUTH).round() as usize;
    let spinup_steps = (spinup_mtu / DT_TRUTH).round() as usize;
    let production_steps = (production_mtu / DT_TRUTH).round() as usize;
    let n_state = p.k + p.n_fast();

    let mut state = rng::standard_normal_vec(seed, &[rng::tag::INIT], n_state);
    for step in 0..spinup_steps {
        state = integrators::ssprk3_step(&state, |s, o| dynamics::truth_rhs_flat(s, p, o), DT_TRUTH);
        if !state_admissible(&state) {
            return Err(Error::Divergence { step: step + 1 });
        }
    }

    let n_snapshots = production_steps / store_every + 1;
    let mut snapshots = Vec::with_capacity(n_snapshots);
    let mut fast = if store_fast { Some(Vec::with_capacity(n_snapshots)) } else { None };
    // Coarsening operator: slow-variable projection plus temporal subsampling;
    // snapshots equal the slow block of the full state exactly.
    let push = |s: &[f64], fast: &mut Option<Vec<Vec<f64>>>| {
        if let Some(f) = fast.as_mut() {
            f.push(s[p.k..].to_vec());
        }
        s[..p.k].to_vec()
    };
    snapshots.push(push(&state, &mut fast));
    for step in 0..production_steps {
        state = integrators::ssprk3_step(&state, |s, o| dynamics::truth_rhs_flat(s, p, o), DT_TRUTH);
        if !state_admissible(&state) {
            return Err(Error::Divergence {
                step: spinup_steps + step + 1,
            });
        }
        if (step + 1) % store_every == 0 {
            snapshots.push(push(&state, &mut fast));
        }
    }
    debug_assert_eq!(snapshots.len(), n_snapshots);

    Ok(TruthDataset {
        params: *p,
        dt_store: DT_STORE,
        snapshots,
        meta: DatasetMeta {
            seed,
            spinup_mtu,
            production_mtu,
        },
        fast,
    })
}

/// Measures the sub-grid tendency from consecutive snapshots:
/// `U_k(t) = -X_{k-1}(X_{k-2} - X_{k+1}) - X_k + F - (X_k(t+dt) - X_k(t)) / dt`.
pub fn measure_subgrid_tendency(ds: &TruthDataset) -> Result<TendencyField> {
    if ds.snapshots.len() < 2 {
        return Err(Error::InvalidParam(
            "tendency measurement needs at least two snapshots".into(),
        ));
    }
    let k = ds.params.k;
    let n = ds.snapshots.len() - 1;
    let dt = ds.dt_store;
    let mut vals = vec![0.0; k * n];
    let mut stencil = vec![0.0; k];
    for t in 0..n {
        let x = &ds.snapshots[t];
        let xn = &ds.snapshots[t + 1];
        dynamics::slow_stencil(x, ds.params.f, &mut stencil);
        for i in 0..k {
            vals[i * n + t] = stencil[i] - (xn[i] - x[i]) / dt;
        }
    }
    TendencyField::new(k, n, vals)
}

/// Contiguous 80/20 split along the time axis: the first 80% of snapshots go
/// to training, the final 20% to validation.
pub fn split_train_val(ds: &TruthDataset) -> Result<(TruthDataset, TruthDataset)> {
    let n = ds.snapshots.len();
    if n < 5 {
        return Err(Error::InvalidParam(format!(
            "split needs at least 5 snapshots, got {n}"
        )));
    }
    let n_val = n / 5;
    let n_train = n - n_val;
    let mut train = ds.clone();
    let mut val = ds.clone();
    train.snapshots = ds.snapshots[..n_train].to_vec();
    val.snapshots = ds.snapshots[n_train..].to_vec();
    if let Some(fast) = &ds.fast {
        train.fast = Some(fast[..n_train].to_vec());
        val.fast = Some(fast[n_train..].to_vec());
    }
    Ok((train, val))
}

/// Pooled sample variance of the stored slow variables.
pub fn sample_variance(ds: &TruthDataset) -> f64 {
    let pooled: Vec<f64> = ds.snapshots.iter().flatten().copied().collect();
    linalg::sample_variance(&pooled)
}

/// Reference spread scale of the slow variables: the pooled sample standard
/// deviation (6.45 for the c=4 case, 5.08 for c=10). Initial-condition
/// perturbations are drawn with variance `fraction * spread_scale`.
pub fn spread_scale(ds: &TruthDataset) -> f64 {
    sample_variance(ds).sqrt()
}

/// Snapshot accessor as a validated state.
pub fn snapshot_state(ds: &TruthDataset, t: usize) -> Result<SlowState> {
    SlowState::new(ds.snapshots[t].clone(), ds.params.k)
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.json");
    PathBuf::from(os)
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    kind: String,
    params: L96Params,
    dt_store: f64,
    n_snapshots: usize,
    meta: DatasetMeta,
    stores_fast: bool,
}

/// Writes the dataset container plus a human-readable JSON sidecar.
pub fn save(ds: &TruthDataset, path: &Path) -> Result<()> {
    let mut w = container::file_writer(path, Kind::Dataset)?;
    w.put_u32(ds.params.k as u32)?;
    w.put_u32(ds.params.j as u32)?;
    w.put_f64(ds.dt_store)?;
    w.put_u64(ds.snapshots.len() as u64)?;
    w.put_f64(ds.params.c)?;
    w.put_f64(ds.params.f)?;
    w.put_u64(ds.meta.seed)?;
    w.put_u8(u8::from(ds.fast.is_some()))?;
    for snap in &ds.snapshots {
        w.put_f64_slice(snap)?;
    }
    if let Some(fast) = &ds.fast {
        for snap in fast {
            w.put_f64_slice(snap)?;
        }
    }
    w.finish()?;

    let sidecar = Sidecar {
        kind: "dataset".into(),
        params: ds.params,
        dt_store: ds.dt_store,
        n_snapshots: ds.snapshots.len(),
        meta: ds.meta.clone(),
        stores_fast: ds.fast.is_some(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(sidecar_path(path), json + "\n")?;
    Ok(())
}

/// Loads a dataset container. The binary header restores K, J, dt_store, c,
/// F, and the seed; h, b, and run lengths come from the sidecar, falling back
/// to the reference-case values when the sidecar is absent.
pub fn load(path: &Path) -> Result<TruthDataset> {
    let mut r = container::file_reader(path)?;
    r.expect_kind(Kind::Dataset)?;
    let k = r.get_u32()? as usize;
    let j = r.get_u32()? as usize;
    let dt_store = r.get_f64()?;
    let count = r.get_u64()? as usize;
    let c = r.get_f64()?;
    let f = r.get_f64()?;
    let seed = r.get_u64()?;
    let has_fast = r.get_u8()? != 0;

    let sidecar: Option<Sidecar> = std::fs::read_to_string(sidecar_path(path))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok());
    let (h, b, meta) = match &sidecar {
        Some(sc) => (sc.params.h, sc.params.b, sc.meta.clone()),
        None => (
            1.0,
            10.0,
            DatasetMeta {
                seed,
                spinup_mtu: f64::NAN,
                production_mtu: (count.saturating_sub(1)) as f64 * dt_store,
            },
        ),
    };
    let params = L96Params::new(k, j, h, f, b, c)?;

    let mut snapshots = Vec::with_capacity(count);
    for _ in 0..count {
        snapshots.push(r.get_f64_vec(k)?);
    }
    let fast = if has_fast {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            out.push(r.get_f64_vec(j * k)?);
        }
        Some(out)
    } else {
        None
    };
    Ok(TruthDataset {
        params,
        dt_store,
        snapshots,
        meta,
        fast,
    })
}
