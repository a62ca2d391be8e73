//! Continuous ranked probability score of an ensemble against a scalar
//! observation, its spread-scaled variant, and the per-batch training loss.
//!
//! The discrete score is
//! `CRPS(z, y) = (1/M) sum_i |z_i - y| - (1/(2 M^2)) sum_{i,k} |z_i - z_k|`;
//! the scaled form multiplies the self-spread term by `alpha` in `[0, 1]`.

use crate::error::{Error, Result};
use crate::linalg;
use serde::{Deserialize, Serialize};

/// One ensemble for one variable at one time.
#[derive(Debug, Clone)]
pub struct EnsembleSlice(pub Vec<f64>);

impl EnsembleSlice {
    pub fn new(members: Vec<f64>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidParam("ensemble needs at least one member".into()));
        }
        if !members.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParam("non-finite ensemble member".into()));
        }
        Ok(Self(members))
    }
}

/// Divisor convention for the self-spread term. The crate default divides by
/// `2 M^2`; the fair estimator divides by `2 M (M - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SpreadDivisor {
    #[default]
    Standard,
    Fair,
}

/// Loss assembly configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Self-spread weight.
    pub alpha: f64,
    /// Trajectory length in coarse steps.
    pub n_t: usize,
    /// Ensembles per batch.
    pub n_b: usize,
}

impl LossConfig {
    pub fn new(alpha: f64, n_t: usize, n_b: usize) -> Result<Self> {
        validate_alpha(alpha)?;
        if n_t < 1 || n_b < 1 {
            return Err(Error::InvalidParam(
                "trajectory length and batch size must be positive".into(),
            ));
        }
        Ok(Self { alpha, n_t, n_b })
    }
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParam(format!(
            "alpha must lie in [0, 1] (the spread weight cannot exceed 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Mean absolute error term and self-spread term of the score, both
/// unweighted. The spread term already carries its divisor.
fn crps_terms(members: &[f64], obs: f64, divisor: SpreadDivisor) -> (f64, f64) {
    let m = members.len();
    let mf = m as f64;
    let mut err = 0.0;
    for &z in members {
        err += (z - obs).abs();
    }
    err /= mf;
    let mut spread = 0.0;
    for i in 0..m {
        for k in 0..m {
            spread += (members[i] - members[k]).abs();
        }
    }
    let denom = match divisor {
        SpreadDivisor::Standard => 2.0 * mf * mf,
        SpreadDivisor::Fair => {
            if m < 2 {
                return (err, 0.0);
            }
            2.0 * mf * (mf - 1.0)
        }
    };
    (err, spread / denom)
}

/// The discrete CRPS with the 1/(2M^2) spread divisor. Nonnegative and zero
/// exactly when every member equals the observation.
pub fn crps(members: &[f64], obs: f64) -> f64 {
    let (err, spread) = crps_terms(members, obs, SpreadDivisor::Standard);
    err - spread
}

/// CRPS with the fair spread estimator (divisor `2 M (M - 1)`).
pub fn crps_fair(members: &[f64], obs: f64) -> f64 {
    let (err, spread) = crps_terms(members, obs, SpreadDivisor::Fair);
    err - spread
}

/// CRPS with the self-spread penalty weighted by `alpha`: `alpha = 1` recovers
/// [`crps`]; `alpha = 0` leaves only the ensemble mean absolute error.
pub fn scaled_crps(members: &[f64], obs: f64, alpha: f64) -> Result<f64> {
    validate_alpha(alpha)?;
    Ok(scaled_crps_unchecked(members, obs, alpha))
}

/// Hot-path kernel; callers must have validated `alpha`.
pub(crate) fn scaled_crps_unchecked(members: &[f64], obs: f64, alpha: f64) -> f64 {
    let (err, spread) = crps_terms(members, obs, SpreadDivisor::Standard);
    err - alpha * spread
}

/// Scaled CRPS plus a flag marking whether any absolute-value argument sat
/// exactly on a kink (member equal to the observation, or tied members).
pub(crate) fn scaled_crps_value_kink(members: &[f64], obs: f64, alpha: f64) -> (f64, bool) {
    let mut kink = false;
    for (i, &zi) in members.iter().enumerate() {
        if zi == obs {
            kink = true;
        }
        for &zk in &members[i + 1..] {
            if zi == zk {
                kink = true;
            }
        }
    }
    (scaled_crps_unchecked(members, obs, alpha), kink)
}

/// Gradient of the scaled CRPS with respect to the members, using the zero
/// subgradient at kinks. Returns the gradient with respect to the observation
/// and whether any absolute-value argument sat exactly on a kink.
pub(crate) fn scaled_crps_gradient(
    members: &[f64],
    obs: f64,
    alpha: f64,
    grad_members: &mut [f64],
) -> (f64, bool) {
    let m = members.len() as f64;
    let mut kink = false;
    let mut grad_obs = 0.0;
    for (i, &zi) in members.iter().enumerate() {
        let d = zi - obs;
        if d == 0.0 {
            kink = true;
        }
        let s = linalg::sgn(d);
        grad_members[i] = s / m;
        grad_obs -= s / m;
        let mut pair = 0.0;
        for (k, &zk) in members.iter().enumerate() {
            if i != k && zi == zk {
                kink = true;
            }
            pair += linalg::sgn(zi - zk);
        }
        grad_members[i] -= alpha * pair / (m * m);
    }
    (grad_obs, kink)
}

/// Reference segment and matching ensemble states for one batch element.
/// `ensemble[member][t]` and `reference[t]` are K-vectors; index `t = 0` is
/// the shared initial condition and the loss runs over `t = 1..=n_t`.
#[derive(Debug, Clone)]
pub struct BatchElement {
    pub ensemble: Vec<Vec<Vec<f64>>>,
    pub reference: Vec<Vec<f64>>,
}

/// Per-batch loss: mean over ensembles and lead times of the scaled CRPS
/// summed over variables,
/// `(1/(N_b N_t)) sum_i sum_j [sum_k scaled_crps(ensemble_i(t_j)[k], ref)]`.
pub fn batch_loss(batch: &[BatchElement], alpha: f64) -> Result<f64> {
    validate_alpha(alpha)?;
    if batch.is_empty() {
        return Err(Error::InvalidParam("empty batch".into()));
    }
    let n_t = batch[0].reference.len().saturating_sub(1);
    if n_t == 0 {
        return Err(Error::InvalidParam(
            "batch elements need at least one post-initial state".into(),
        ));
    }
    let mut total = 0.0;
    for elem in batch {
        if elem.reference.len() != n_t + 1 {
            return Err(Error::ShapeMismatch(
                "batch elements disagree on trajectory length".into(),
            ));
        }
        let k = elem.reference[0].len();
        let m = elem.ensemble.len();
        if m == 0 {
            return Err(Error::InvalidParam("ensemble with no members".into()));
        }
        for member in &elem.ensemble {
            if member.len() != n_t + 1 || member.iter().any(|s| s.len() != k) {
                return Err(Error::ShapeMismatch(
                    "ensemble member shape disagrees with reference".into(),
                ));
            }
        }
        let mut slice = vec![0.0; m];
        for t in 1..=n_t {
            for var in 0..k {
                for (i, member) in elem.ensemble.iter().enumerate() {
                    slice[i] = member[t][var];
                }
                total += scaled_crps_unchecked(&slice, elem.reference[t][var], alpha);
            }
        }
    }
    Ok(total / (batch.len() as f64 * n_t as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn hand_cases() {
        assert_relative_eq!(crps(&[0.0, 2.0], 1.0), 0.5, epsilon = 1e-12);
        assert_eq!(crps(&[1.0], 1.0), 0.0);
        assert_eq!(crps(&[3.0, 3.0, 3.0], 3.0), 0.0);
    }

    #[test]
    fn scaled_hand_cases() {
        assert_relative_eq!(scaled_crps(&[0.0, 2.0], 1.0, 0.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(scaled_crps(&[0.0, 2.0], 1.0, 1.0).unwrap(), 0.5, epsilon = 1e-12);
        assert_relative_eq!(scaled_crps(&[0.0, 2.0], 1.0, 0.5).unwrap(), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn alpha_is_validated() {
        assert!(scaled_crps(&[1.0], 0.0, 1.1).is_err());
        assert!(scaled_crps(&[1.0], 0.0, -0.1).is_err());
        assert!(LossConfig::new(0.5, 0, 1).is_err());
        assert!(LossConfig::new(0.5, 1, 0).is_err());
        assert!(LossConfig::new(2.0, 1, 1).is_err());
    }

    #[test]
    fn fair_divisor_differs_as_documented() {
        // Fair spread term scales the standard one by M/(M-1).
        let members = [0.0, 1.0, 3.0];
        let obs = 0.5;
        let (err, spread) = crps_terms(&members, obs, SpreadDivisor::Standard);
        let fair = crps_fair(&members, obs);
        assert_relative_eq!(fair, err - spread * 3.0 / 2.0, epsilon = 1e-14);
        // single member: no pairs, fair spread is zero
        assert_eq!(crps_fair(&[2.0], 1.0), 1.0);
    }

    /// Exact quadrature of the CDF-integral definition
    /// `int (F(s) - 1{s >= y})^2 ds` for a step-function empirical CDF.
    /// Independent of the double-sum implementation.
    fn crps_cdf_integral(members: &[f64], obs: f64) -> f64 {
        let mut pts: Vec<f64> = members.to_vec();
        pts.push(obs);
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        let m = members.len() as f64;
        let mut total = 0.0;
        for w in pts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let mid = 0.5 * (lo + hi);
            let f = members.iter().filter(|&&z| z <= mid).count() as f64 / m;
            let ind = if mid >= obs { 1.0 } else { 0.0 };
            total += (f - ind).powi(2) * (hi - lo);
        }
        total
    }

    #[test]
    fn matches_cdf_integral_oracle() {
        let mut worst: f64 = 0.0;
        for trial in 0..100u64 {
            let m = 1 + (trial as usize % 6);
            let draws = crate::rng::standard_normal_vec(900 + trial, &[1], m + 1);
            let members: Vec<f64> = draws[..m].iter().map(|v| v * 2.0).collect();
            let obs = draws[m];
            worst = worst.max((crps(&members, obs) - crps_cdf_integral(&members, obs)).abs());
        }
        assert!(worst < 1e-6, "max deviation {worst}");
    }

    #[test]
    fn batch_loss_reductions() {
        let elem = BatchElement {
            ensemble: vec![vec![vec![0.0], vec![0.0]], vec![vec![0.0], vec![2.0]]],
            reference: vec![vec![0.0], vec![1.0]],
        };
        // N_b = 1, N_t = 1, K = 1 reduces to the scaled CRPS of that slice
        let l = batch_loss(std::slice::from_ref(&elem), 1.0).unwrap();
        assert_relative_eq!(l, crps(&[0.0, 2.0], 1.0), epsilon = 1e-14);
        // duplicating the ensemble leaves the mean unchanged
        let l2 = batch_loss(&[elem.clone(), elem.clone()], 1.0).unwrap();
        assert_relative_eq!(l, l2, epsilon = 1e-14);
        // members equal to refs everywhere -> zero
        let perfect = BatchElement {
            ensemble: vec![vec![vec![1.0], vec![2.0]]; 3],
            reference: vec![vec![1.0], vec![2.0]],
        };
        assert_eq!(batch_loss(&[perfect], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn batch_loss_rejects_mismatched_shapes() {
        let elem = BatchElement {
            ensemble: vec![vec![vec![0.0], vec![0.0, 1.0]]],
            reference: vec![vec![0.0], vec![1.0]],
        };
        assert!(batch_loss(&[elem], 1.0).is_err());
    }

    #[test]
    fn gradient_kink_detection() {
        let mut g = vec![0.0; 2];
        let (_, kink) = scaled_crps_gradient(&[1.0, 2.0], 1.0, 1.0, &mut g);
        assert!(kink); // member equals obs
        let (_, kink) = scaled_crps_gradient(&[1.0, 1.0], 0.0, 1.0, &mut g);
        assert!(kink); // tied members
        let (_, kink) = scaled_crps_gradient(&[1.0, 2.0], 0.5, 1.0, &mut g);
        assert!(!kink);
    }

    proptest! {
        #[test]
        fn nonnegative_and_translation_invariant(
            members in proptest::collection::vec(-50.0f64..50.0, 1..8),
            obs in -50.0f64..50.0,
            shift in -20.0f64..20.0,
        ) {
            let v = crps(&members, obs);
            prop_assert!(v >= -1e-12);
            let shifted: Vec<f64> = members.iter().map(|z| z + shift).collect();
            prop_assert!((crps(&shifted, obs + shift) - v).abs() < 1e-9);
        }

        #[test]
        fn positively_homogeneous(
            members in proptest::collection::vec(-10.0f64..10.0, 1..6),
            obs in -10.0f64..10.0,
            scale in 0.01f64..100.0,
        ) {
            let v = crps(&members, obs);
            let scaled: Vec<f64> = members.iter().map(|z| z * scale).collect();
            let vs = crps(&scaled, obs * scale);
            prop_assert!((vs - scale * v).abs() < 1e-8 * scale.max(1.0));
        }

        #[test]
        fn non_increasing_in_alpha(
            members in proptest::collection::vec(-10.0f64..10.0, 2..6),
            obs in -10.0f64..10.0,
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let v_lo = scaled_crps(&members, obs, lo).unwrap();
            let v_hi = scaled_crps(&members, obs, hi).unwrap();
            prop_assert!(v_hi <= v_lo + 1e-12);
        }
    }
}
