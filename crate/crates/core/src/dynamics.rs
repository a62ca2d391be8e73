//! Tendencies of the two-scale Lorenz '96 truth system and the coarse
//! single-scale system with a pluggable forcing vector.
//!
//! All indices are 0-based internally; the cyclic stencils wrap with
//! `rem_euclid`-style arithmetic.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Parameters of the two-scale system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L96Params {
    /// Number of slow variables.
    pub k: usize,
    /// Fast variables per slow variable.
    pub j: usize,
    /// Coupling constant.
    pub h: f64,
    /// Constant forcing.
    pub f: f64,
    /// Spatial scale ratio.
    pub b: f64,
    /// Temporal scale ratio.
    pub c: f64,
}

impl L96Params {
    pub fn new(k: usize, j: usize, h: f64, f: f64, b: f64, c: f64) -> Result<Self> {
        if k < 4 {
            return Err(Error::InvalidParam(format!(
                "K must be at least 4 for the cyclic stencil, got {k}"
            )));
        }
        if j < 1 {
            return Err(Error::InvalidParam("J must be at least 1".into()));
        }
        if b == 0.0 {
            return Err(Error::InvalidParam("b must be nonzero".into()));
        }
        Ok(Self { k, j, h, f, b, c })
    }

    /// Reference case with temporal scale ratio c = 4.
    pub fn case_c4() -> Self {
        Self {
            k: 8,
            j: 32,
            h: 1.0,
            f: 20.0,
            b: 10.0,
            c: 4.0,
        }
    }

    /// Reference case with temporal scale ratio c = 10.
    pub fn case_c10() -> Self {
        Self {
            c: 10.0,
            ..Self::case_c4()
        }
    }

    pub fn n_fast(&self) -> usize {
        self.j * self.k
    }
}

/// State of the truth system: K slow variables followed by J*K fast ones.
#[derive(Debug, Clone, PartialEq)]
pub struct FullState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl FullState {
    pub fn new(x: Vec<f64>, y: Vec<f64>, p: &L96Params) -> Result<Self> {
        if x.len() != p.k || y.len() != p.n_fast() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} slow and {} fast variables, got {} and {}",
                p.k,
                p.n_fast(),
                x.len(),
                y.len()
            )));
        }
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidParam("non-finite state entry".into()));
        }
        Ok(Self { x, y })
    }

    /// Flat layout `[x..., y...]` used by the integrators.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.x.len() + self.y.len());
        out.extend_from_slice(&self.x);
        out.extend_from_slice(&self.y);
        out
    }

    pub fn from_flat(flat: &[f64], p: &L96Params) -> Self {
        Self {
            x: flat[..p.k].to_vec(),
            y: flat[p.k..].to_vec(),
        }
    }
}

/// State of the coarse system: the K slow variables.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowState(pub Vec<f64>);

impl SlowState {
    pub fn new(x: Vec<f64>, k: usize) -> Result<Self> {
        if x.len() != k {
            return Err(Error::ShapeMismatch(format!(
                "expected {k} slow variables, got {}",
                x.len()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParam("non-finite state entry".into()));
        }
        Ok(Self(x))
    }
}

/// The cyclic advection-damping-forcing stencil shared by both systems:
/// `-X_{k-1} (X_{k-2} - X_{k+1}) - X_k + f`.
#[inline]
pub fn slow_stencil(x: &[f64], f: f64, out: &mut [f64]) {
    let k = x.len();
    for i in 0..k {
        let xm1 = x[(i + k - 1) % k];
        let xm2 = x[(i + k - 2) % k];
        let xp1 = x[(i + 1) % k];
        let adv = xm1 * (xm2 - xp1);
        out[i] = -adv - x[i] + f;
    }
}

/// Tendency of the full two-scale system on the flat `[x..., y...]` layout.
pub fn truth_rhs_flat(state: &[f64], p: &L96Params, out: &mut [f64]) {
    let k = p.k;
    let jk = p.n_fast();
    debug_assert_eq!(state.len(), k + jk);
    debug_assert_eq!(out.len(), k + jk);
    let (x, y) = state.split_at(k);
    let (dx, dy) = out.split_at_mut(k);

    slow_stencil(x, p.f, dx);
    let hc_b = p.h * p.c / p.b;
    for i in 0..k {
        let mut coupling = 0.0;
        for jj in i * p.j..(i + 1) * p.j {
            coupling += y[jj];
        }
        dx[i] -= hc_b * coupling;
    }

    let cb = p.c * p.b;
    for jj in 0..jk {
        let yp1 = y[(jj + 1) % jk];
        let yp2 = y[(jj + 2) % jk];
        let ym1 = y[(jj + jk - 1) % jk];
        dy[jj] = -cb * yp1 * (yp2 - ym1) - p.c * y[jj] + hc_b * x[jj / p.j];
    }
}

/// Tendency of the truth system.
pub fn truth_rhs(state: &FullState, p: &L96Params) -> FullState {
    let flat = state.to_flat();
    let mut out = vec![0.0; flat.len()];
    truth_rhs_flat(&flat, p, &mut out);
    FullState::from_flat(&out, p)
}

/// Tendency of the coarse system with forcing vector `m`.
pub fn coarse_rhs(x: &[f64], m: &[f64], p: &L96Params, out: &mut [f64]) {
    debug_assert_eq!(x.len(), p.k);
    debug_assert_eq!(m.len(), p.k);
    slow_stencil(x, p.f, out);
    for i in 0..p.k {
        out[i] += m[i];
    }
}
