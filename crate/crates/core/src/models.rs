//! Sub-grid forcing models and their calibration.
//!
//! Six forms share one interface: the local polynomial with white or AR(1)
//! residual noise, the global POD model with white or AR(1) mode noise, and
//! the trainable coupled Ornstein–Uhlenbeck model in additive and
//! multiplicative form.
//!
//! Unit convention: the deterministic part of the forcing (polynomial fit,
//! mean profile) is a tendency and enters the drift of each RK stage; the
//! stochastic part is the per-step increment added to the state, held fixed
//! across the three stages of a step. AR(1) states are scaled so their
//! stationary variance matches the white-noise increments `N(0, S^2 dt)`.

use crate::container::{self, Kind};
use crate::dataset::{TendencyField, TruthDataset};
use crate::dynamics::{self, L96Params};
use crate::error::{Error, Result};
use crate::integrators::{self, NoiseIncrement};
use crate::linalg;
use crate::pod::{self, PodBasis};
use crate::rng;
use std::path::Path;

/// Spin-up length (coarse steps) for the coupled OU noise state of each
/// ensemble member; long enough to reach the stationary distribution at the
/// default drift scale.
pub const BURNIN_STEPS: usize = 64;

// ---------------------------------------------------------------------------
// model types

/// Residual noise of the local model.
#[derive(Debug, Clone, PartialEq)]
pub enum ResidualNoise {
    White { s2: f64 },
    Ar1 { s2: f64, phi: f64 },
}

/// Local cubic-polynomial model with per-variable residual noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyModel {
    pub k: usize,
    /// Cubic coefficients b0..b3.
    pub coeffs: [f64; 4],
    pub noise: ResidualNoise,
}

impl PolyModel {
    pub fn new(k: usize, coeffs: [f64; 4], noise: ResidualNoise) -> Result<Self> {
        match noise {
            ResidualNoise::White { s2 } if s2 <= 0.0 => {
                return Err(Error::InvalidParam("noise variance must be positive".into()))
            }
            ResidualNoise::Ar1 { s2, phi } => {
                if s2 <= 0.0 {
                    return Err(Error::InvalidParam("noise variance must be positive".into()));
                }
                if phi.abs() >= 1.0 {
                    return Err(Error::InvalidParam(format!(
                        "AR(1) coefficient must satisfy |phi| < 1, got {phi}"
                    )));
                }
            }
            _ => {}
        }
        Ok(Self { k, coeffs, noise })
    }

    pub fn deterministic(&self, x: f64) -> f64 {
        let [b0, b1, b2, b3] = self.coeffs;
        b0 + b1 * x + b2 * x * x + b3 * x * x * x
    }
}

/// Noise driving the global model's mode coefficients.
#[derive(Debug, Clone, PartialEq)]
pub enum GlobalNoise {
    White,
    /// One AR(1) coefficient per mode (unit stationary variance before the
    /// `sqrt(dt)` scaling).
    Ar1 { phis: Vec<f64> },
}

/// Global model: mean profile plus POD modes driven by independent scalar
/// processes.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub basis: PodBasis,
    pub noise: GlobalNoise,
}

impl GlobalModel {
    pub fn new(basis: PodBasis, noise: GlobalNoise) -> Result<Self> {
        if !basis.is_complete() {
            return Err(Error::InvalidParam(
                "global model requires a complete basis".into(),
            ));
        }
        if let GlobalNoise::Ar1 { phis } = &noise {
            if phis.len() != basis.k() {
                return Err(Error::ShapeMismatch("one phi per mode required".into()));
            }
            if phis.iter().any(|p| p.abs() >= 1.0) {
                return Err(Error::InvalidParam("|phi| < 1 required per mode".into()));
            }
        }
        Ok(Self { basis, noise })
    }
}

/// Additive or multiplicative scaling of the coupled OU forcing.
#[derive(Debug, Clone, PartialEq)]
pub enum OuForm {
    Additive,
    /// Per-mode scaling `c_i(X) = a_i + b_i (xi_i . X)^2`, evaluated at the
    /// pre-step state.
    Multiplicative { a: Vec<f64>, b: Vec<f64> },
}

/// Trainable coupled Ornstein–Uhlenbeck model on the POD modes.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledOuModel {
    modes: Vec<Vec<f64>>,
    /// Row-major K x K matrix with mode i in column i.
    xi_flat: Vec<f64>,
    pub mu: Vec<f64>,
    /// Per-step (dt-absorbed) drift matrix, row-major K x K.
    pub a_mat: Vec<f64>,
    /// Noise scaling matrix, row-major K x K.
    pub b_mat: Vec<f64>,
    pub form: OuForm,
    /// Trainable initial noise state; when absent the process starts at `mu`.
    pub init_state: Option<Vec<f64>>,
}

impl CoupledOuModel {
    pub fn new(
        modes: Vec<Vec<f64>>,
        mu: Vec<f64>,
        a_mat: Vec<f64>,
        b_mat: Vec<f64>,
        form: OuForm,
        init_state: Option<Vec<f64>>,
    ) -> Result<Self> {
        let k = modes.len();
        if k == 0 || modes.iter().any(|m| m.len() != k) {
            return Err(Error::ShapeMismatch("modes must form a square family".into()));
        }
        if mu.len() != k || a_mat.len() != k * k || b_mat.len() != k * k {
            return Err(Error::ShapeMismatch("parameter block sizes must match K".into()));
        }
        if let OuForm::Multiplicative { a, b } = &form {
            if a.len() != k || b.len() != k {
                return Err(Error::ShapeMismatch("one (a, b) pair per mode required".into()));
            }
        }
        if let Some(r0) = &init_state {
            if r0.len() != k {
                return Err(Error::ShapeMismatch("initial state must have length K".into()));
            }
        }
        let mut xi_flat = vec![0.0; k * k];
        for (i, m) in modes.iter().enumerate() {
            for r in 0..k {
                xi_flat[r * k + i] = m[r];
            }
        }
        Ok(Self {
            modes,
            xi_flat,
            mu,
            a_mat,
            b_mat,
            form,
            init_state,
        })
    }

    /// Untrained model: `mu = 0`, `A = 0.03 I`, `B = I`, and for the
    /// multiplicative form `a = 1`, `b = 0`. The initial stationary forcing
    /// then sits at the scale of the measured sub-grid variability: a
    /// stable, over-dispersed prior whose contraction and systematic
    /// corrections are both clearly visible to the optimizer.
    pub fn untrained(modes: Vec<Vec<f64>>, multiplicative: bool) -> Result<Self> {
        let k = modes.len();
        let mut a_mat = vec![0.0; k * k];
        let mut b_mat = vec![0.0; k * k];
        for i in 0..k {
            a_mat[i * k + i] = 0.03;
            b_mat[i * k + i] = 1.0;
        }
        let form = if multiplicative {
            OuForm::Multiplicative {
                a: vec![1.0; k],
                b: vec![0.0; k],
            }
        } else {
            OuForm::Additive
        };
        Self::new(modes, vec![0.0; k], a_mat, b_mat, form, None)
    }

    pub fn k(&self) -> usize {
        self.mu.len()
    }

    pub fn modes(&self) -> &[Vec<f64>] {
        &self.modes
    }

    /// Row-major map from mode coefficients to physical space.
    pub fn xi_flat(&self) -> &[f64] {
        &self.xi_flat
    }

    pub fn initial_noise(&self) -> Vec<f64> {
        self.init_state.clone().unwrap_or_else(|| self.mu.clone())
    }
}

/// Tagged union over the six model forms.
#[derive(Debug, Clone, PartialEq)]
pub enum StochasticModel {
    Poly(PolyModel),
    Global(GlobalModel),
    CoupledOu(CoupledOuModel),
}

/// On-disk tag byte and reporting identity of a model form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelTag {
    PolyGauss = 1,
    PolyOu = 2,
    SvdGauss = 3,
    SvdOu = 4,
    CrpsOu = 5,
    CrpsMult = 6,
}

impl ModelTag {
    pub fn name(self) -> &'static str {
        match self {
            ModelTag::PolyGauss => "poly_gauss",
            ModelTag::PolyOu => "poly_ou",
            ModelTag::SvdGauss => "svd_gauss",
            ModelTag::SvdOu => "svd_ou",
            ModelTag::CrpsOu => "crps_ou",
            ModelTag::CrpsMult => "crps_mult",
        }
    }
}

/// Per-member noise state; never shared between members.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberNoise {
    pub r: Vec<f64>,
}

impl StochasticModel {
    pub fn k(&self) -> usize {
        match self {
            StochasticModel::Poly(m) => m.k,
            StochasticModel::Global(m) => m.basis.k(),
            StochasticModel::CoupledOu(m) => m.k(),
        }
    }

    /// Number of independent noise channels (q = K for every form).
    pub fn noise_channels(&self) -> usize {
        self.k()
    }

    pub fn tag(&self) -> ModelTag {
        match self {
            StochasticModel::Poly(m) => match m.noise {
                ResidualNoise::White { .. } => ModelTag::PolyGauss,
                ResidualNoise::Ar1 { .. } => ModelTag::PolyOu,
            },
            StochasticModel::Global(m) => match m.noise {
                GlobalNoise::White => ModelTag::SvdGauss,
                GlobalNoise::Ar1 { .. } => ModelTag::SvdOu,
            },
            StochasticModel::CoupledOu(m) => match m.form {
                OuForm::Additive => ModelTag::CrpsOu,
                OuForm::Multiplicative { .. } => ModelTag::CrpsMult,
            },
        }
    }

    pub fn name(&self) -> &'static str {
        self.tag().name()
    }

    /// Noise state before any spin-up: AR(1) states at their stationary mean
    /// zero; the coupled OU process at `mu` (or the trainable initial state).
    pub fn init_noise(&self) -> MemberNoise {
        let r = match self {
            StochasticModel::Poly(m) => vec![0.0; m.k],
            StochasticModel::Global(m) => vec![0.0; m.basis.k()],
            StochasticModel::CoupledOu(m) => m.initial_noise(),
        };
        MemberNoise { r }
    }

    /// Member noise state spun up by [`BURNIN_STEPS`] applications of the
    /// noise update with the supplied standard normal draws. For the coupled
    /// OU forms this samples the stationary distribution anchored at `mu`
    /// (members would otherwise carry zero initial forcing spread); AR(1)
    /// states keep their stationary mean start.
    pub fn init_noise_with<F>(&self, dt: f64, mut eps: F) -> MemberNoise
    where
        F: FnMut(usize) -> Vec<f64>,
    {
        let mut state = self.init_noise();
        if let StochasticModel::CoupledOu(m) = self {
            for step in 0..BURNIN_STEPS {
                state.r = coupled_ou_step(&state.r, &m.mu, &m.a_mat, &m.b_mat, &eps(step), dt);
            }
        }
        state
    }

    /// [`Self::init_noise_with`] drawing from the keyed stream
    /// `[..path, BURNIN, step]`.
    pub fn init_noise_keyed(&self, master: u64, path: &[u64], dt: f64) -> MemberNoise {
        let k = self.noise_channels();
        let mut full_path = path.to_vec();
        self.init_noise_with(dt, |step| {
            full_path.truncate(path.len());
            full_path.push(rng::tag::BURNIN);
            full_path.push(step as u64);
            rng::standard_normal_vec(master, &full_path, k)
        })
    }

    /// Advances the noise state once per coarse step. `eps` holds K standard
    /// normal draws.
    pub fn advance_noise(&self, state: &mut MemberNoise, eps: &[f64], dt: f64) {
        debug_assert_eq!(eps.len(), self.noise_channels());
        match self {
            StochasticModel::Poly(m) => match m.noise {
                ResidualNoise::White { s2 } => {
                    let s = (s2 * dt).sqrt();
                    for (r, e) in state.r.iter_mut().zip(eps) {
                        *r = s * e;
                    }
                }
                ResidualNoise::Ar1 { s2, phi } => {
                    for (r, e) in state.r.iter_mut().zip(eps) {
                        *r = ar1_step(*r, s2, phi, dt, *e);
                    }
                }
            },
            StochasticModel::Global(m) => match &m.noise {
                GlobalNoise::White => {
                    let s = dt.sqrt();
                    for (r, e) in state.r.iter_mut().zip(eps) {
                        *r = s * e;
                    }
                }
                GlobalNoise::Ar1 { phis } => {
                    for i in 0..state.r.len() {
                        state.r[i] = ar1_step(state.r[i], 1.0, phis[i], dt, eps[i]);
                    }
                }
            },
            StochasticModel::CoupledOu(m) => {
                state.r = coupled_ou_step(&state.r, &m.mu, &m.a_mat, &m.b_mat, eps, dt);
            }
        }
    }

    /// Deterministic tendency contribution of the forcing, evaluated at a
    /// stage state.
    pub fn det_tendency(&self, x: &[f64], out: &mut [f64]) {
        match self {
            StochasticModel::Poly(m) => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o = m.deterministic(xi);
                }
            }
            StochasticModel::Global(m) => out.copy_from_slice(&m.basis.xi0),
            StochasticModel::CoupledOu(_) => out.fill(0.0),
        }
    }

    /// Per-step stochastic increment, fixed across the stages of one step.
    /// The multiplicative scaling uses the pre-step state.
    pub fn stochastic_increment(&self, state: &MemberNoise, x_pre: &[f64]) -> Vec<f64> {
        match self {
            StochasticModel::Poly(_) => state.r.clone(),
            StochasticModel::Global(m) => {
                let k = m.basis.k();
                let mut g = vec![0.0; k];
                for (i, mode) in m.basis.modes.iter().enumerate() {
                    let w = m.basis.lambdas[i] * state.r[i];
                    for row in 0..k {
                        g[row] += mode[row] * w;
                    }
                }
                g
            }
            StochasticModel::CoupledOu(m) => {
                let k = m.k();
                let mut g = vec![0.0; k];
                match &m.form {
                    OuForm::Additive => {
                        linalg::matvec(&m.xi_flat, k, k, &state.r, &mut g);
                    }
                    OuForm::Multiplicative { a, b } => {
                        let mut cr = vec![0.0; k];
                        for i in 0..k {
                            let p = linalg::dot(&m.modes[i], x_pre);
                            let c = a[i] + b[i] * (p * p);
                            cr[i] = c * state.r[i];
                        }
                        linalg::matvec(&m.xi_flat, k, k, &cr, &mut g);
                    }
                }
                g
            }
        }
    }

    /// The forcing vector `M(X, t)` as written: deterministic tendency plus
    /// the current stochastic term. For the coupled OU forms only the mode
    /// sum appears (the mean profile is absorbed by `mu`).
    pub fn forcing(&self, state: &MemberNoise, x: &[f64]) -> Vec<f64> {
        let k = self.k();
        let mut out = vec![0.0; k];
        self.det_tendency(x, &mut out);
        let inc = self.stochastic_increment(state, x);
        for (o, g) in out.iter_mut().zip(&inc) {
            *o += g;
        }
        out
    }

    /// One coarse model step: advance the noise state, freeze the increment,
    /// and take a stochastic SSPRK3 step of the forced coarse dynamics.
    pub fn step(
        &self,
        p: &L96Params,
        x: &[f64],
        noise: &mut MemberNoise,
        eps: &[f64],
        dt: f64,
    ) -> Vec<f64> {
        self.advance_noise(noise, eps, dt);
        let g_inc = self.stochastic_increment(noise, x);
        let dw = NoiseIncrement(Vec::new());
        integrators::stochastic_ssprk3_step(
            x,
            |s, out| {
                dynamics::slow_stencil(s, p.f, out);
                match self {
                    StochasticModel::Poly(m) => {
                        for (o, &xi) in out.iter_mut().zip(s) {
                            *o += m.deterministic(xi);
                        }
                    }
                    StochasticModel::Global(m) => {
                        for (o, x0) in out.iter_mut().zip(&m.basis.xi0) {
                            *o += x0;
                        }
                    }
                    StochasticModel::CoupledOu(_) => {}
                }
            },
            |_, _, out| out.copy_from_slice(&g_inc),
            &dw,
            dt,
        )
    }
}

/// Rolls a model trajectory of `n_steps` coarse steps from `x0` with the
/// given member noise state, drawing the per-step standard normals from
/// `eps`. Returns all `n_steps + 1` states and fails with the step index on
/// divergence.
pub fn rollout_model<F>(
    model: &StochasticModel,
    p: &L96Params,
    x0: &[f64],
    mut noise: MemberNoise,
    n_steps: usize,
    dt: f64,
    mut eps: F,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(usize) -> Vec<f64>,
{
    integrators::rollout(
        x0,
        n_steps,
        |step, x| model.step(p, x, &mut noise, &eps(step), dt),
        |_, _| {},
    )
}

// ---------------------------------------------------------------------------
// elementary stochastic updates

/// Zero-mean AR(1) update `r' = phi r + sqrt(dt s2 (1 - phi^2)) eps`, scaled
/// so the stationary variance equals the white-noise increments `N(0, s2 dt)`.
pub fn ar1_step(r: f64, s2: f64, phi: f64, dt: f64, eps: f64) -> f64 {
    phi * r + (dt * s2 * (1.0 - phi * phi)).sqrt() * eps
}

/// Coupled OU update `r' = r + A (mu - r) + B eps sqrt(dt)` with `A` the
/// per-step (dt-absorbed) drift and `eps` a vector of independent standard
/// normals.
pub fn coupled_ou_step(
    r: &[f64],
    mu: &[f64],
    a_mat: &[f64],
    b_mat: &[f64],
    eps: &[f64],
    dt: f64,
) -> Vec<f64> {
    let k = r.len();
    let sqrt_dt = dt.sqrt();
    let mut d = vec![0.0; k];
    for i in 0..k {
        d[i] = mu[i] - r[i];
    }
    let mut ad = vec![0.0; k];
    linalg::matvec(a_mat, k, k, &d, &mut ad);
    let eps_dt: Vec<f64> = eps.iter().map(|e| e * sqrt_dt).collect();
    let mut be = vec![0.0; k];
    linalg::matvec(b_mat, k, k, &eps_dt, &mut be);
    let mut out = vec![0.0; k];
    for i in 0..k {
        out[i] = r[i] + ad[i] + be[i];
    }
    out
}

// ---------------------------------------------------------------------------
// derivative-fitting calibration

/// Pooled ordinary least squares of `u` on the basis `{1, x, x^2, x^3}`.
/// Returns the coefficients and the fit residuals aligned with the inputs.
pub fn fit_local_polynomial(xs: &[f64], us: &[f64]) -> Result<([f64; 4], Vec<f64>)> {
    if xs.len() != us.len() {
        return Err(Error::ShapeMismatch("x and u sample counts differ".into()));
    }
    if xs.len() < 4 {
        return Err(Error::InvalidParam("need at least 4 samples".into()));
    }
    // The cubic fit needs 4 distinct abscissae.
    let mut distinct: Vec<f64> = Vec::with_capacity(4);
    for &x in xs {
        if !distinct.iter().any(|&d| d == x) {
            distinct.push(x);
            if distinct.len() == 4 {
                break;
            }
        }
    }
    if distinct.len() < 4 {
        return Err(Error::RankDeficient);
    }

    // Normal equations on mean-scaled moments for conditioning.
    let n = xs.len() as f64;
    let mut moments = [0.0f64; 7]; // mean of x^0 .. x^6
    let mut rhs = [0.0f64; 4]; // mean of x^p * u
    for (&x, &u) in xs.iter().zip(us) {
        let mut xp = 1.0;
        for (p, m) in moments.iter_mut().enumerate() {
            *m += xp;
            if p < 4 {
                rhs[p] += xp * u;
            }
            xp *= x;
        }
    }
    for m in moments.iter_mut() {
        *m /= n;
    }
    for r in rhs.iter_mut() {
        *r /= n;
    }
    let gram = nalgebra::Matrix4::from_fn(|i, j| moments[i + j]);
    let b = nalgebra::Vector4::from_row_slice(&rhs);
    let coeffs = gram.lu().solve(&b).ok_or(Error::RankDeficient)?;
    let c = [coeffs[0], coeffs[1], coeffs[2], coeffs[3]];
    let residuals = xs
        .iter()
        .zip(us)
        .map(|(&x, &u)| u - (c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x))
        .collect();
    Ok((c, residuals))
}

/// Local-model calibration over a snapshot sequence: pools all variables and
/// times, fits the cubic, and returns the residuals shaped like the tendency
/// field.
pub struct LocalFit {
    pub coeffs: [f64; 4],
    pub residuals: TendencyField,
}

pub fn fit_local_model(snapshots: &[Vec<f64>], u: &TendencyField) -> Result<LocalFit> {
    let k = u.k;
    let n = u.n_times;
    if snapshots.len() < n + 1 {
        return Err(Error::ShapeMismatch(
            "snapshot count must cover the tendency field".into(),
        ));
    }
    let mut xs = Vec::with_capacity(k * n);
    let mut us = Vec::with_capacity(k * n);
    for var in 0..k {
        let row = u.row(var);
        for t in 0..n {
            xs.push(snapshots[t][var]);
            us.push(row[t]);
        }
    }
    let (coeffs, residuals) = fit_local_polynomial(&xs, &us)?;
    Ok(LocalFit {
        coeffs,
        residuals: TendencyField::new(k, n, residuals)?,
    })
}

/// Pooled AR(1) fit of the residual field: `s2` is the pooled sample
/// variance, `phi` the pooled lag-1 autocorrelation at the measurement
/// interval `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar1Fit {
    pub s2: f64,
    pub phi: f64,
    /// Lag at which `phi` was measured.
    pub dt: f64,
}

pub fn fit_residual_ar1(residuals: &TendencyField, dt: f64) -> Result<Ar1Fit> {
    if residuals.n_times < 2 {
        return Err(Error::InvalidParam(
            "AR(1) fit needs at least two residual samples per variable".into(),
        ));
    }
    let total = residuals.values();
    let m = linalg::mean(total);
    let mut num = 0.0;
    let mut den = 0.0;
    for var in 0..residuals.k {
        let row = residuals.row(var);
        for t in 0..row.len() {
            den += (row[t] - m) * (row[t] - m);
            if t + 1 < row.len() {
                num += (row[t] - m) * (row[t + 1] - m);
            }
        }
    }
    let s2 = den / (total.len() - 1) as f64;
    let phi = if den == 0.0 { 0.0 } else { num / den };
    Ok(Ar1Fit { s2, phi, dt })
}

/// All four derivative-fitting baselines calibrated from one dataset.
pub struct BaselineFits {
    pub poly_gauss: StochasticModel,
    pub poly_ou: StochasticModel,
    pub svd_gauss: StochasticModel,
    pub svd_ou: StochasticModel,
    pub basis: PodBasis,
    pub local: LocalFit,
    pub ar1: Ar1Fit,
}

/// Fits the local and global models on the (training portion of a) dataset.
pub fn fit_baselines(train: &TruthDataset) -> Result<BaselineFits> {
    let u = crate::dataset::measure_subgrid_tendency(train)?;
    let local = fit_local_model(&train.snapshots, &u)?;
    let ar1 = fit_residual_ar1(&local.residuals, train.dt_store)?;
    let basis = pod::compute_pod(&u)?;
    let k = train.params.k;

    let poly_gauss = StochasticModel::Poly(PolyModel::new(
        k,
        local.coeffs,
        ResidualNoise::White { s2: ar1.s2 },
    )?);
    let poly_ou = StochasticModel::Poly(PolyModel::new(
        k,
        local.coeffs,
        ResidualNoise::Ar1 {
            s2: ar1.s2,
            phi: ar1.phi,
        },
    )?);
    let svd_gauss = StochasticModel::Global(GlobalModel::new(basis.clone(), GlobalNoise::White)?);
    let svd_ou = StochasticModel::Global(GlobalModel::new(
        basis.clone(),
        GlobalNoise::Ar1 {
            phis: basis.autocorr.clone(),
        },
    )?);
    Ok(BaselineFits {
        poly_gauss,
        poly_ou,
        svd_gauss,
        svd_ou,
        basis,
        local,
        ar1,
    })
}

// ---------------------------------------------------------------------------
// persistence

/// Writes a model container with a tag byte per form; round-trips bit-exactly.
pub fn save(model: &StochasticModel, path: &Path) -> Result<()> {
    let mut w = container::file_writer(path, Kind::Model)?;
    w.put_u8(model.tag() as u8)?;
    w.put_u32(model.k() as u32)?;
    match model {
        StochasticModel::Poly(m) => {
            let (s2, phi) = match m.noise {
                ResidualNoise::White { s2 } => (s2, 0.0),
                ResidualNoise::Ar1 { s2, phi } => (s2, phi),
            };
            w.put_f64_slice(&m.coeffs)?;
            w.put_f64(s2)?;
            w.put_f64(phi)?;
        }
        StochasticModel::Global(m) => {
            pod::write_block(&mut w, &m.basis, true)?;
            match &m.noise {
                GlobalNoise::White => w.put_u32(0)?,
                GlobalNoise::Ar1 { phis } => {
                    w.put_u32(phis.len() as u32)?;
                    w.put_f64_slice(phis)?;
                }
            }
        }
        StochasticModel::CoupledOu(m) => {
            w.put_u8(u8::from(m.init_state.is_some()))?;
            for mode in &m.modes {
                w.put_f64_slice(mode)?;
            }
            w.put_f64_slice(&m.mu)?;
            w.put_f64_slice(&m.a_mat)?;
            w.put_f64_slice(&m.b_mat)?;
            if let OuForm::Multiplicative { a, b } = &m.form {
                w.put_f64_slice(a)?;
                w.put_f64_slice(b)?;
            }
            if let Some(r0) = &m.init_state {
                w.put_f64_slice(r0)?;
            }
        }
    }
    w.finish()
}

pub fn load(path: &Path) -> Result<StochasticModel> {
    let mut r = container::file_reader(path)?;
    r.expect_kind(Kind::Model)?;
    let tag = r.get_u8()?;
    let k = r.get_u32()? as usize;
    match tag {
        1 | 2 => {
            let cs = r.get_f64_vec(4)?;
            let s2 = r.get_f64()?;
            let phi = r.get_f64()?;
            let noise = if tag == 1 {
                ResidualNoise::White { s2 }
            } else {
                ResidualNoise::Ar1 { s2, phi }
            };
            Ok(StochasticModel::Poly(PolyModel::new(
                k,
                [cs[0], cs[1], cs[2], cs[3]],
                noise,
            )?))
        }
        3 | 4 => {
            let basis = pod::read_block(&mut r)?;
            let n_phi = r.get_u32()? as usize;
            let noise = if n_phi == 0 {
                GlobalNoise::White
            } else {
                GlobalNoise::Ar1 {
                    phis: r.get_f64_vec(n_phi)?,
                }
            };
            Ok(StochasticModel::Global(GlobalModel::new(basis, noise)?))
        }
        5 | 6 => {
            let has_init = r.get_u8()? != 0;
            let mut modes = Vec::with_capacity(k);
            for _ in 0..k {
                modes.push(r.get_f64_vec(k)?);
            }
            let mu = r.get_f64_vec(k)?;
            let a_mat = r.get_f64_vec(k * k)?;
            let b_mat = r.get_f64_vec(k * k)?;
            let form = if tag == 6 {
                OuForm::Multiplicative {
                    a: r.get_f64_vec(k)?,
                    b: r.get_f64_vec(k)?,
                }
            } else {
                OuForm::Additive
            };
            let init_state = if has_init { Some(r.get_f64_vec(k)?) } else { None };
            Ok(StochasticModel::CoupledOu(CoupledOuModel::new(
                modes, mu, a_mat, b_mat, form, init_state,
            )?))
        }
        other => Err(Error::Container(format!("unknown model tag {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;

    fn toy_basis(k: usize) -> PodBasis {
        let u = TendencyField::new(
            k,
            64,
            rng::standard_normal_vec(77, &[5], k * 64),
        )
        .unwrap();
        pod::compute_pod(&u).unwrap()
    }

    #[test]
    fn polynomial_fit_recovers_exact_cubic() {
        let xs: Vec<f64> = (0..200).map(|i| -2.0 + i as f64 * 0.02).collect();
        let us: Vec<f64> = xs.iter().map(|&x| 1.0 + 2.0 * x - x * x * x).collect();
        let (c, res) = fit_local_polynomial(&xs, &us).unwrap();
        assert_relative_eq!(c[0], 1.0, epsilon = 1e-8);
        assert_relative_eq!(c[1], 2.0, epsilon = 1e-8);
        assert!(c[2].abs() < 1e-8);
        assert_relative_eq!(c[3], -1.0, epsilon = 1e-8);
        assert!(res.iter().all(|r| r.abs() < 1e-8));
    }

    #[test]
    fn polynomial_fit_of_constant_data() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let us = vec![5.0; 50];
        let (c, _) = fit_local_polynomial(&xs, &us).unwrap();
        assert_relative_eq!(c[0], 5.0, epsilon = 1e-9);
        assert!(c[1].abs() < 1e-9 && c[2].abs() < 1e-9 && c[3].abs() < 1e-9);
    }

    #[test]
    fn polynomial_fit_rejects_degenerate_design() {
        let xs = vec![1.0; 10];
        let us = vec![2.0; 10];
        assert!(matches!(
            fit_local_polynomial(&xs, &us),
            Err(Error::RankDeficient)
        ));
        assert!(fit_local_polynomial(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ar1_fit_on_iid_noise() {
        let k = 4;
        let n = 25_000;
        let vals = rng::standard_normal_vec(3, &[6], k * n);
        let field = TendencyField::new(k, n, vals).unwrap();
        let fit = fit_residual_ar1(&field, 0.005).unwrap();
        assert!((fit.s2 - 1.0).abs() < 0.05, "s2 = {}", fit.s2);
        assert!(fit.phi.abs() < 0.02, "phi = {}", fit.phi);
    }

    #[test]
    fn ar1_fit_recovers_synthetic_coefficient() {
        let phi: f64 = 0.9;
        let n = 100_000;
        let eps = rng::standard_normal_vec(8, &[7], n);
        let mut series = vec![0.0; n];
        for t in 1..n {
            series[t] = phi * series[t - 1] + (1.0 - phi * phi).sqrt() * eps[t];
        }
        let field = TendencyField::new(1, n, series).unwrap();
        let fit = fit_residual_ar1(&field, 0.005).unwrap();
        assert!((fit.phi - phi).abs() < 0.02, "phi = {}", fit.phi);
    }

    #[test]
    fn ar1_step_reductions() {
        // phi = 0 reduces to the uncorrelated model
        let r = ar1_step(3.0, 4.0, 0.0, 0.01, 1.5);
        assert_relative_eq!(r, (0.01f64 * 4.0).sqrt() * 1.5, epsilon = 1e-15);
        // eps = 0 decays geometrically
        assert_relative_eq!(ar1_step(2.0, 4.0, 0.7, 0.01, 0.0), 1.4, epsilon = 1e-15);
    }

    #[test]
    fn ar1_stationary_variance() {
        let s2 = 2.5;
        let phi = 0.9;
        let dt = 0.005;
        let n = 1_000_000;
        let eps = rng::standard_normal_vec(44, &[9], n);
        let mut r = 0.0;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for e in eps {
            r = ar1_step(r, s2, phi, dt, e);
            acc += r;
            acc2 += r * r;
        }
        let mean = acc / n as f64;
        let var = acc2 / n as f64 - mean * mean;
        assert!(
            (var - dt * s2).abs() < 0.03 * dt * s2,
            "var = {var}, expected {}",
            dt * s2
        );
    }

    #[test]
    fn coupled_ou_step_trivial_cases() {
        let k = 3;
        let zero = vec![0.0; k * k];
        let mut eye = vec![0.0; k * k];
        for i in 0..k {
            eye[i * k + i] = 1.0;
        }
        let r = vec![1.0, -2.0, 0.5];
        let mu = vec![0.3, 0.4, -0.1];
        // A = 0, B = 0 keeps the state
        let out = coupled_ou_step(&r, &mu, &zero, &zero, &[1.0, 1.0, 1.0], 0.25);
        assert_eq!(out, r);
        // A = I, B = 0 jumps to mu in one step
        let out = coupled_ou_step(&r, &mu, &eye, &zero, &[0.0; 3], 0.25);
        for i in 0..k {
            assert_relative_eq!(out[i], mu[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn coupled_ou_step_increment_variance() {
        let k = 2;
        let zero = vec![0.0; k * k];
        let mut eye = vec![0.0; k * k];
        for i in 0..k {
            eye[i * k + i] = 1.0;
        }
        let dt = 0.25;
        let n = 100_000;
        let eps = rng::standard_normal_vec(15, &[3], n * k);
        let mut acc2 = [0.0; 2];
        for trial in 0..n {
            let r = vec![0.0; k];
            let out = coupled_ou_step(
                &r,
                &[0.0; 2],
                &zero,
                &eye,
                &eps[trial * k..(trial + 1) * k],
                dt,
            );
            for i in 0..k {
                acc2[i] += (out[i] - r[i]).powi(2);
            }
        }
        for v in acc2 {
            let var = v / n as f64;
            assert!((var - dt).abs() < 0.03 * dt, "var = {var}");
        }
    }

    #[test]
    fn forcing_reductions() {
        let basis = toy_basis(8);
        // global model with all noise states zero: forcing equals xi0
        let gm = StochasticModel::Global(
            GlobalModel::new(basis.clone(), GlobalNoise::White).unwrap(),
        );
        let st = gm.init_noise();
        let f = gm.forcing(&st, &[0.0; 8]);
        for i in 0..8 {
            assert_relative_eq!(f[i], basis.xi0[i], epsilon = 1e-15);
        }

        // multiplicative form with b = 0 is state-independent
        let mut ou = CoupledOuModel::untrained(basis.modes.clone(), true).unwrap();
        if let OuForm::Multiplicative { a, .. } = &mut ou.form {
            a.iter_mut().enumerate().for_each(|(i, v)| *v = 1.0 + i as f64 * 0.1);
        }
        let model = StochasticModel::CoupledOu(ou.clone());
        let mut st = model.init_noise();
        st.r = rng::standard_normal_vec(5, &[11], 8);
        let x1 = rng::standard_normal_vec(6, &[12], 8);
        let x2 = rng::standard_normal_vec(7, &[13], 8);
        let f1 = model.forcing(&st, &x1);
        let f2 = model.forcing(&st, &x2);
        for i in 0..8 {
            assert_relative_eq!(f1[i], f2[i], epsilon = 1e-14);
        }
        // and it matches the additive weighting by a_i
        let mut expect = vec![0.0; 8];
        if let OuForm::Multiplicative { a, .. } = &ou.form {
            for (i, mode) in ou.modes().iter().enumerate() {
                for row in 0..8 {
                    expect[row] += mode[row] * a[i] * st.r[i];
                }
            }
        }
        for i in 0..8 {
            assert_relative_eq!(f1[i], expect[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn poly_forcing_at_reference_coefficients() {
        // c = 4 local fit evaluated at x = 0 with zero noise state
        let m = StochasticModel::Poly(
            PolyModel::new(
                8,
                [-2.20, 0.575, -0.00499, -0.000216],
                ResidualNoise::White { s2: 4.61 },
            )
            .unwrap(),
        );
        let st = m.init_noise();
        let f = m.forcing(&st, &[0.0; 8]);
        for v in f {
            assert_relative_eq!(v, -2.20, epsilon = 1e-12);
        }
    }

    #[test]
    fn member_order_is_immaterial_with_keyed_streams() {
        let basis = toy_basis(8);
        let model = StochasticModel::CoupledOu(
            CoupledOuModel::untrained(basis.modes.clone(), false).unwrap(),
        );
        let p = L96Params::case_c4();
        let x0 = rng::standard_normal_vec(1, &[20], 8);
        let run_member = |member: u64| {
            let mut x = x0.clone();
            let mut st = model.init_noise();
            for step in 0..10u64 {
                let eps = rng::standard_normal_vec(9, &[rng::tag::FORECAST, member, step], 8);
                x = model.step(&p, &x, &mut st, &eps, 0.005);
            }
            x
        };
        let first_then_second = (run_member(0), run_member(1));
        let second_then_first = (run_member(1), run_member(0));
        assert_eq!(first_then_second.0, second_then_first.1);
        assert_eq!(first_then_second.1, second_then_first.0);
    }

    #[test]
    fn serialization_roundtrips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let basis = toy_basis(6);
        let models = vec![
            StochasticModel::Poly(
                PolyModel::new(6, [0.1, -0.2, 0.3, -0.4], ResidualNoise::White { s2: 1.5 })
                    .unwrap(),
            ),
            StochasticModel::Poly(
                PolyModel::new(6, [0.1, -0.2, 0.3, -0.4], ResidualNoise::Ar1 { s2: 1.5, phi: 0.9 })
                    .unwrap(),
            ),
            StochasticModel::Global(GlobalModel::new(basis.clone(), GlobalNoise::White).unwrap()),
            StochasticModel::Global(
                GlobalModel::new(
                    basis.clone(),
                    GlobalNoise::Ar1 {
                        phis: basis.autocorr.clone(),
                    },
                )
                .unwrap(),
            ),
            StochasticModel::CoupledOu(CoupledOuModel::untrained(basis.modes.clone(), false).unwrap()),
            StochasticModel::CoupledOu(CoupledOuModel::untrained(basis.modes.clone(), true).unwrap()),
        ];
        for (i, m) in models.iter().enumerate() {
            let path = dir.path().join(format!("m{i}.l96"));
            save(m, &path).unwrap();
            let back = load(&path).unwrap();
            assert_eq!(*m, back, "model {i} ({})", m.name());
        }
    }

    #[test]
    fn untrained_parameter_shapes() {
        let basis = toy_basis(8);
        let add = CoupledOuModel::untrained(basis.modes.clone(), false).unwrap();
        assert_eq!(add.mu.len() + add.a_mat.len() + add.b_mat.len(), 8 + 64 + 64);
        let mult = CoupledOuModel::untrained(basis.modes.clone(), true).unwrap();
        if let OuForm::Multiplicative { a, b } = &mult.form {
            assert_eq!(a.len() + b.len(), 16);
            assert!(a.iter().all(|&v| v == 1.0));
            assert!(b.iter().all(|&v| v == 0.0));
        } else {
            panic!("expected multiplicative form");
        }
    }
}
