//! Time stepping: deterministic SSPRK3 in Shu–Osher form, a stochastic
//! extension that injects the same Brownian increment into every Euler stage
//! (Stratonovich convention), and rollout drivers with divergence detection.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Any slow variable beyond this magnitude is treated as a blow-up; the
/// attractor magnitudes are O(10).
pub const DIVERGENCE_THRESHOLD: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    DeterministicSsprk3,
    StochasticSsprk3,
}

/// Step specification: step size in MTU plus the scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSpec {
    pub dt: f64,
    pub scheme: Scheme,
}

impl StepSpec {
    pub fn new(dt: f64, scheme: Scheme) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParam(format!("dt must be positive, got {dt}")));
        }
        Ok(Self { dt, scheme })
    }
}

/// One Brownian increment per step: `q` Gaussian draws of variance `dt`,
/// drawn once and reused across all three stages.
#[derive(Debug, Clone)]
pub struct NoiseIncrement(pub Vec<f64>);

impl NoiseIncrement {
    /// Builds the increment from standard normal draws: `dW = eps * sqrt(dt)`.
    pub fn from_standard_normal(eps: &[f64], dt: f64) -> Self {
        let s = dt.sqrt();
        Self(eps.iter().map(|e| e * s).collect())
    }
}

/// One deterministic SSPRK3 step in Shu–Osher form:
/// `k1 = y + dt f(y)`, `k2 = 3/4 y + 1/4 (k1 + dt f(k1))`,
/// `out = 1/3 y + 2/3 (k2 + dt f(k2))`.
pub fn ssprk3_step<F>(y: &[f64], mut f: F, dt: f64) -> Vec<f64>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let n = y.len();
    let mut tend = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    f(y, &mut tend);
    for i in 0..n {
        k1[i] = y[i] + dt * tend[i];
    }
    let mut k2 = vec![0.0; n];
    f(&k1, &mut tend);
    for i in 0..n {
        let e = k1[i] + dt * tend[i];
        k2[i] = 0.75 * y[i] + 0.25 * e;
    }
    let mut out = vec![0.0; n];
    f(&k2, &mut tend);
    for i in 0..n {
        let e = k2[i] + dt * tend[i];
        out[i] = (1.0 / 3.0) * y[i] + (2.0 / 3.0) * e;
    }
    out
}

/// One stochastic SSPRK3 step. Each Euler stage becomes
/// `y* + dt f(y*) + g(y*, dW)`, with the same `dW` in all three stages. With
/// `g == 0` this reduces to the deterministic scheme; evaluating the diffusion
/// at the stage states yields the Stratonovich interpretation.
pub fn stochastic_ssprk3_step<F, G>(
    y: &[f64],
    mut f: F,
    mut g: G,
    dw: &NoiseIncrement,
    dt: f64,
) -> Vec<f64>
where
    F: FnMut(&[f64], &mut [f64]),
    G: FnMut(&[f64], &[f64], &mut [f64]),
{
    let n = y.len();
    let mut tend = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    f(y, &mut tend);
    g(y, &dw.0, &mut diff);
    for i in 0..n {
        k1[i] = y[i] + dt * tend[i] + diff[i];
    }
    let mut k2 = vec![0.0; n];
    f(&k1, &mut tend);
    g(&k1, &dw.0, &mut diff);
    for i in 0..n {
        let e = k1[i] + dt * tend[i] + diff[i];
        k2[i] = 0.75 * y[i] + 0.25 * e;
    }
    let mut out = vec![0.0; n];
    f(&k2, &mut tend);
    g(&k2, &dw.0, &mut diff);
    for i in 0..n {
        let e = k2[i] + dt * tend[i] + diff[i];
        out[i] = (1.0 / 3.0) * y[i] + (2.0 / 3.0) * e;
    }
    out
}

/// Returns true when a state is inside the admissible region.
pub fn state_admissible(state: &[f64]) -> bool {
    state
        .iter()
        .all(|v| v.is_finite() && v.abs() <= DIVERGENCE_THRESHOLD)
}

/// Drives `n_steps` applications of `step`, returning all `n_steps + 1`
/// states including the initial one. `hook` observes every accepted state
/// (step index, state); the step closure may evolve auxiliary state such as
/// noise processes. Fails with the step index on divergence.
pub fn rollout<S, H>(
    initial: &[f64],
    n_steps: usize,
    mut step: S,
    mut hook: H,
) -> Result<Vec<Vec<f64>>>
where
    S: FnMut(usize, &[f64]) -> Vec<f64>,
    H: FnMut(usize, &[f64]),
{
    if !state_admissible(initial) {
        return Err(Error::Divergence { step: 0 });
    }
    let mut states = Vec::with_capacity(n_steps + 1);
    hook(0, initial);
    states.push(initial.to_vec());
    for s in 0..n_steps {
        let next = step(s, states.last().expect("nonempty"));
        if !state_admissible(&next) {
            return Err(Error::Divergence { step: s + 1 });
        }
        hook(s + 1, &next);
        states.push(next);
    }
    Ok(states)
}
