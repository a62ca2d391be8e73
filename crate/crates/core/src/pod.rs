//! Proper orthogonal decomposition of the sub-grid tendency field.
//!
//! The time-mean profile is subtracted from the measurement matrix; the SVD
//! of the anomaly matrix yields unit-norm spatial modes, eigenvalue scalings,
//! and unit-variance time series so that
//! `U(t) = xi0 + sum_i xi_i * lambda_i * a_i(t)` holds to round-off.

use crate::container::{self, Kind};
use crate::dataset::TendencyField;
use crate::error::{Error, Result};
use crate::linalg;
use nalgebra::DMatrix;
use std::path::Path;

/// Singular values below `RANK_TOL * sigma_max` are treated as zero.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    /// Mean profile (time-mean of the tendency field per variable).
    pub xi0: Vec<f64>,
    /// Unit-norm spatial modes, strongest first. Fewer than K entries signal
    /// a rank-deficient field.
    pub modes: Vec<Vec<f64>>,
    /// Nonnegative scalings, sorted descending, normalized so the stored
    /// series have unit sample variance.
    pub lambdas: Vec<f64>,
    /// Unit-variance time series per mode.
    pub series: Vec<Vec<f64>>,
    /// Lag-1 sample autocorrelation of each series at the storage interval.
    pub autocorr: Vec<f64>,
}

impl PodBasis {
    pub fn k(&self) -> usize {
        self.xi0.len()
    }

    /// True when the decomposition retained all K modes.
    pub fn is_complete(&self) -> bool {
        self.modes.len() == self.k()
    }

    /// Modes as a row-major K x n_modes matrix with mode `i` in column `i`,
    /// i.e. the map from mode coefficients to physical space.
    pub fn modes_matrix(&self) -> Vec<f64> {
        let k = self.k();
        let m = self.modes.len();
        let mut out = vec![0.0; k * m];
        for (i, mode) in self.modes.iter().enumerate() {
            for r in 0..k {
                out[r * m + i] = mode[r];
            }
        }
        out
    }
}

/// Computes the basis from a tendency field. Requires more measurement times
/// than variables; a rank-deficient anomaly matrix yields fewer modes.
pub fn compute_pod(u: &TendencyField) -> Result<PodBasis> {
    let k = u.k;
    let n = u.n_times;
    if n <= k {
        return Err(Error::InvalidParam(format!(
            "POD needs more than {k} measurement times, got {n}"
        )));
    }

    let xi0: Vec<f64> = (0..k).map(|i| linalg::mean(u.row(i))).collect();

    // Anomaly matrix transposed (time x space): tall-thin SVD is cheap and
    // its right singular vectors are the spatial modes.
    let mut anom = DMatrix::zeros(n, k);
    for i in 0..k {
        let row = u.row(i);
        for t in 0..n {
            anom[(t, i)] = row[t] - xi0[i];
        }
    }
    let svd = anom.svd(true, true);
    let u_t = svd.u.as_ref().expect("left vectors requested");
    let v_t = svd.v_t.as_ref().expect("right vectors requested");

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .expect("finite singular values")
    });
    let sigma_max = svd.singular_values[order[0]].max(0.0);

    let norm = ((n - 1) as f64).sqrt();
    let mut modes = Vec::new();
    let mut lambdas = Vec::new();
    let mut series = Vec::new();
    let mut autocorr = Vec::new();
    for &idx in &order {
        let sigma = svd.singular_values[idx];
        if sigma <= RANK_TOL * sigma_max || sigma == 0.0 {
            continue; // degenerate direction, dropped and flagged via is_complete
        }
        let mut mode: Vec<f64> = (0..k).map(|r| v_t[(idx, r)]).collect();
        let mut a: Vec<f64> = (0..n).map(|t| u_t[(t, idx)] * norm).collect();
        // Deterministic sign fix: the entry of largest magnitude is positive.
        let (mut max_abs, mut max_val) = (0.0, 0.0);
        for &v in &mode {
            if v.abs() > max_abs {
                max_abs = v.abs();
                max_val = v;
            }
        }
        if max_val < 0.0 {
            for v in mode.iter_mut() {
                *v = -*v;
            }
            for v in a.iter_mut() {
                *v = -*v;
            }
        }
        autocorr.push(linalg::lag1_autocorr(&a));
        modes.push(mode);
        lambdas.push(sigma / norm);
        series.push(a);
    }

    Ok(PodBasis {
        xi0,
        modes,
        lambdas,
        series,
        autocorr,
    })
}

/// Inner products of the state with each mode.
pub fn project(basis: &PodBasis, x: &[f64]) -> Vec<f64> {
    basis.modes.iter().map(|m| linalg::dot(m, x)).collect()
}

/// Writes a basis container (header: K, mode count, series length).
pub fn save(basis: &PodBasis, path: &Path) -> Result<()> {
    let mut w = container::file_writer(path, Kind::Basis)?;
    write_block(&mut w, basis, true)?;
    w.finish()
}

pub(crate) fn write_block<W: std::io::Write>(
    w: &mut container::Writer<W>,
    basis: &PodBasis,
    with_series: bool,
) -> Result<()> {
    let n_times = if with_series {
        basis.series.first().map_or(0, Vec::len)
    } else {
        0
    };
    w.put_u32(basis.k() as u32)?;
    w.put_u32(basis.modes.len() as u32)?;
    w.put_u64(n_times as u64)?;
    w.put_f64_slice(&basis.xi0)?;
    for m in &basis.modes {
        w.put_f64_slice(m)?;
    }
    w.put_f64_slice(&basis.lambdas)?;
    w.put_f64_slice(&basis.autocorr)?;
    if with_series {
        for s in &basis.series {
            w.put_f64_slice(s)?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<PodBasis> {
    let mut r = container::file_reader(path)?;
    r.expect_kind(Kind::Basis)?;
    read_block(&mut r)
}

pub(crate) fn read_block<R: std::io::Read>(r: &mut container::Reader<R>) -> Result<PodBasis> {
    let k = r.get_u32()? as usize;
    let n_modes = r.get_u32()? as usize;
    let n_times = r.get_u64()? as usize;
    let xi0 = r.get_f64_vec(k)?;
    let mut modes = Vec::with_capacity(n_modes);
    for _ in 0..n_modes {
        modes.push(r.get_f64_vec(k)?);
    }
    let lambdas = r.get_f64_vec(n_modes)?;
    let autocorr = r.get_f64_vec(n_modes)?;
    let mut series = Vec::with_capacity(n_modes);
    for _ in 0..n_modes {
        series.push(r.get_f64_vec(n_times)?);
    }
    Ok(PodBasis {
        xi0,
        modes,
        lambdas,
        series,
        autocorr,
    })
}
