//! Reverse-mode differentiation with vector-valued primitives.
//!
//! The tape is built eagerly: every operation records its operands and
//! computes its value into a shared arena. Gradients are pathwise — noise
//! draws enter as constants, so the recorded loss is a deterministic function
//! of the parameters. Absolute values use the zero subgradient at kinks, and
//! the tape remembers whether any evaluation sat exactly on a kink.

use crate::crps;
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::{CoupledOuModel, OuForm};
use smallvec::SmallVec;

/// Node identifier on a tape.
pub type Var = u32;

/// Default ceiling on tape size; generous for the trainings in this crate
/// (a few hundred thousand nodes per batch element).
pub const DEFAULT_NODE_BUDGET: usize = 50_000_000;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    /// Linear combination `sum_i c_i v_i + bias`, accumulated in term order
    /// with the scalar bias added last. The bias is constant, so only the
    /// terms matter for the backward pass.
    Lc(SmallVec<[(f64, Var); 3]>),
    Mul(Var, Var),
    Abs(Var),
    /// `out[i] = x[(i + shift) mod n]`.
    Rotate { x: Var, shift: i64 },
    /// Row-major `rows x cols` matrix times vector.
    MatVec {
        mat: Var,
        vec: Var,
        rows: u32,
        cols: u32,
    },
    /// Gathers scalars from other nodes: `out[i] = parts[i].0[parts[i].1]`.
    Stack(Vec<(Var, u32)>),
    /// Scalar scaled CRPS of an ensemble vector against a scalar observation.
    ScaledCrps { ens: Var, obs: Var, alpha: f64 },
}

struct Node {
    op: Op,
    off: usize,
    len: usize,
    needs_grad: bool,
}

/// Eager reverse-mode tape.
pub struct Tape {
    nodes: Vec<Node>,
    data: Vec<f64>,
    budget: usize,
    kink_touched: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_budget(DEFAULT_NODE_BUDGET)
    }

    pub fn with_budget(budget: usize) -> Self {
        Self {
            nodes: Vec::new(),
            data: Vec::new(),
            budget,
            kink_touched: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True when any recorded absolute value (including inside CRPS nodes)
    /// was evaluated exactly at zero.
    pub fn kink_touched(&self) -> bool {
        self.kink_touched
    }

    pub fn val(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v as usize];
        &self.data[n.off..n.off + n.len]
    }

    fn push(&mut self, op: Op, vals: Vec<f64>, needs_grad: bool) -> Result<Var> {
        if self.nodes.len() >= self.budget {
            return Err(Error::TapeBudget { budget: self.budget });
        }
        let off = self.data.len();
        self.data.extend_from_slice(&vals);
        self.nodes.push(Node {
            op,
            off,
            len: vals.len(),
            needs_grad,
        });
        Ok((self.nodes.len() - 1) as Var)
    }

    pub fn leaf(&mut self, vals: &[f64]) -> Result<Var> {
        self.push(Op::Leaf, vals.to_vec(), true)
    }

    pub fn constant(&mut self, vals: &[f64]) -> Result<Var> {
        self.push(Op::Constant, vals.to_vec(), false)
    }

    pub fn scalar_constant(&mut self, v: f64) -> Result<Var> {
        self.constant(&[v])
    }

    /// `sum_i c_i v_i + bias`, elementwise over equal-length operands. A unit
    /// coefficient adds the operand directly so the arithmetic matches
    /// hand-written `a + dt * b + c` expressions bit for bit.
    pub fn lc(&mut self, terms: &[(f64, Var)], bias: f64) -> Result<Var> {
        debug_assert!(!terms.is_empty());
        let n = self.nodes[terms[0].1 as usize].len;
        let mut vals = vec![0.0; n];
        let mut needs = false;
        for (ti, &(c, v)) in terms.iter().enumerate() {
            debug_assert_eq!(self.nodes[v as usize].len, n);
            needs |= self.nodes[v as usize].needs_grad;
            let node = &self.nodes[v as usize];
            let (off, len) = (node.off, node.len);
            for i in 0..len {
                let term = if c == 1.0 {
                    self.data[off + i]
                } else {
                    c * self.data[off + i]
                };
                vals[i] = if ti == 0 { term } else { vals[i] + term };
            }
        }
        if bias != 0.0 {
            for v in vals.iter_mut() {
                *v += bias;
            }
        }
        self.push(Op::Lc(SmallVec::from_slice(terms)), vals, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let needs = self.nodes[a as usize].needs_grad || self.nodes[b as usize].needs_grad;
        let vals: Vec<f64> = self
            .val(a)
            .iter()
            .zip(self.val(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a, b), vals, needs)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let needs = self.nodes[x as usize].needs_grad;
        let mut kink = false;
        let vals: Vec<f64> = self
            .val(x)
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    kink = true;
                }
                v.abs()
            })
            .collect();
        self.kink_touched |= kink;
        self.push(Op::Abs(x), vals, needs)
    }

    pub fn rotate(&mut self, x: Var, shift: i64) -> Result<Var> {
        let needs = self.nodes[x as usize].needs_grad;
        let src = self.val(x);
        let n = src.len() as i64;
        let vals: Vec<f64> = (0..n)
            .map(|i| src[(i + shift).rem_euclid(n) as usize])
            .collect();
        self.push(Op::Rotate { x, shift }, vals, needs)
    }

    pub fn matvec(&mut self, mat: Var, vec: Var, rows: usize, cols: usize) -> Result<Var> {
        debug_assert_eq!(self.nodes[mat as usize].len, rows * cols);
        debug_assert_eq!(self.nodes[vec as usize].len, cols);
        let needs = self.nodes[mat as usize].needs_grad || self.nodes[vec as usize].needs_grad;
        let mut vals = vec![0.0; rows];
        {
            let m = &self.nodes[mat as usize];
            let v = &self.nodes[vec as usize];
            let (mo, vo) = (m.off, v.off);
            let mat_slice = &self.data[mo..mo + rows * cols];
            let vec_slice = &self.data[vo..vo + cols];
            linalg::matvec(mat_slice, rows, cols, vec_slice, &mut vals);
        }
        self.push(
            Op::MatVec {
                mat,
                vec,
                rows: rows as u32,
                cols: cols as u32,
            },
            vals,
            needs,
        )
    }

    pub fn stack(&mut self, parts: &[(Var, usize)]) -> Result<Var> {
        let mut vals = Vec::with_capacity(parts.len());
        let mut needs = false;
        for &(v, coord) in parts {
            debug_assert!(coord < self.nodes[v as usize].len);
            needs |= self.nodes[v as usize].needs_grad;
            vals.push(self.val(v)[coord]);
        }
        let op = Op::Stack(parts.iter().map(|&(v, c)| (v, c as u32)).collect());
        self.push(op, vals, needs)
    }

    /// Scalar scaled CRPS of the ensemble node against a scalar observation
    /// node. Kinks (member equal to observation, tied members) are recorded.
    pub fn scaled_crps(&mut self, ens: Var, obs: Var, alpha: f64) -> Result<Var> {
        debug_assert_eq!(self.nodes[obs as usize].len, 1);
        let needs = self.nodes[ens as usize].needs_grad || self.nodes[obs as usize].needs_grad;
        let (value, kink) = {
            let members = self.val(ens);
            let y = self.val(obs)[0];
            crps::scaled_crps_value_kink(members, y, alpha)
        };
        self.kink_touched |= kink;
        self.push(Op::ScaledCrps { ens, obs, alpha }, vec![value], needs)
    }

    /// Reverse accumulation from a scalar root. Returns the gradient arena.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        let root_node = &self.nodes[root as usize];
        if root_node.len != 1 {
            return Err(Error::InvalidParam("backward needs a scalar root node".into()));
        }
        let mut grad = vec![0.0; self.data.len()];
        grad[root_node.off] = 1.0;
        let mut scratch = Vec::new();
        for idx in (0..=root as usize).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let (g_off, g_len) = (node.off, node.len);
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::Lc(terms) => {
                    for &(c, v) in terms.iter() {
                        let tn = &self.nodes[v as usize];
                        if !tn.needs_grad {
                            continue;
                        }
                        for i in 0..g_len {
                            grad[tn.off + i] += c * grad[g_off + i];
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a as usize, *b as usize);
                    let (ao, bo) = (self.nodes[a].off, self.nodes[b].off);
                    if self.nodes[a].needs_grad {
                        for i in 0..g_len {
                            grad[ao + i] += grad[g_off + i] * self.data[bo + i];
                        }
                    }
                    if self.nodes[b].needs_grad {
                        for i in 0..g_len {
                            grad[bo + i] += grad[g_off + i] * self.data[ao + i];
                        }
                    }
                }
                Op::Abs(x) => {
                    let xn = &self.nodes[*x as usize];
                    if xn.needs_grad {
                        for i in 0..g_len {
                            grad[xn.off + i] += grad[g_off + i] * linalg::sgn(self.data[xn.off + i]);
                        }
                    }
                }
                Op::Rotate { x, shift } => {
                    let xn = &self.nodes[*x as usize];
                    if xn.needs_grad {
                        let n = g_len as i64;
                        for i in 0..n {
                            let src = (i + shift).rem_euclid(n) as usize;
                            grad[xn.off + src] += grad[g_off + i as usize];
                        }
                    }
                }
                Op::MatVec { mat, vec, rows, cols } => {
                    let (rows, cols) = (*rows as usize, *cols as usize);
                    let mn_needs = self.nodes[*mat as usize].needs_grad;
                    let vn_needs = self.nodes[*vec as usize].needs_grad;
                    let mo = self.nodes[*mat as usize].off;
                    let vo = self.nodes[*vec as usize].off;
                    if mn_needs {
                        for r in 0..rows {
                            let gr = grad[g_off + r];
                            for c in 0..cols {
                                grad[mo + r * cols + c] += gr * self.data[vo + c];
                            }
                        }
                    }
                    if vn_needs {
                        for r in 0..rows {
                            let gr = grad[g_off + r];
                            for c in 0..cols {
                                grad[vo + c] += self.data[mo + r * cols + c] * gr;
                            }
                        }
                    }
                }
                Op::Stack(parts) => {
                    for (i, &(v, coord)) in parts.iter().enumerate() {
                        let pn = &self.nodes[v as usize];
                        if pn.needs_grad {
                            grad[pn.off + coord as usize] += grad[g_off + i];
                        }
                    }
                }
                Op::ScaledCrps { ens, obs, alpha } => {
                    let en_off = self.nodes[*ens as usize].off;
                    let en_len = self.nodes[*ens as usize].len;
                    let en_needs = self.nodes[*ens as usize].needs_grad;
                    let on_off = self.nodes[*obs as usize].off;
                    let on_needs = self.nodes[*obs as usize].needs_grad;
                    scratch.resize(en_len, 0.0);
                    let (g_obs, _) = {
                        let members = &self.data[en_off..en_off + en_len];
                        crps::scaled_crps_gradient(members, self.data[on_off], *alpha, &mut scratch)
                    };
                    let up = grad[g_off];
                    if en_needs {
                        for i in 0..en_len {
                            grad[en_off + i] += up * scratch[i];
                        }
                    }
                    if on_needs {
                        grad[on_off] += up * g_obs;
                    }
                }
            }
        }
        Ok(Gradients { grad })
    }
}

/// Gradient arena returned by [`Tape::backward`].
pub struct Gradients {
    grad: Vec<f64>,
}

impl Gradients {
    pub fn of<'a>(&'a self, tape: &Tape, v: Var) -> &'a [f64] {
        let n = &tape.nodes[v as usize];
        &self.grad[n.off..n.off + n.len]
    }
}

/// Records a graph built by `build` and returns the scalar loss with its
/// tape and root. Noise draws must already be fixed inside the closure; the
/// recorded value then matches the plain evaluation of the same arithmetic.
pub fn forward_record<F>(budget: usize, build: F) -> Result<(f64, Tape, Var)>
where
    F: FnOnce(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::with_budget(budget);
    let root = build(&mut tape)?;
    let value = {
        let vals = tape.val(root);
        if vals.len() != 1 {
            return Err(Error::InvalidParam("loss root must be scalar".into()));
        }
        vals[0]
    };
    Ok((value, tape, root))
}

// ---------------------------------------------------------------------------
// parameter flattening

/// Stable layout of the trainable parameters of a coupled OU model:
/// `[mu (K) | A (K^2, row-major) | B (K^2) | a (K) | b (K) | r0 (K)]`,
/// with the tail blocks present per the flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub k: usize,
    pub multiplicative: bool,
    pub trainable_init: bool,
}

impl ParamLayout {
    pub fn for_model(model: &CoupledOuModel) -> Self {
        Self {
            k: model.k(),
            multiplicative: matches!(model.form, OuForm::Multiplicative { .. }),
            trainable_init: model.init_state.is_some(),
        }
    }

    pub fn len(&self) -> usize {
        let k = self.k;
        let mut n = k + 2 * k * k;
        if self.multiplicative {
            n += 2 * k;
        }
        if self.trainable_init {
            n += k;
        }
        n
    }

    pub fn mu_range(&self) -> std::ops::Range<usize> {
        0..self.k
    }

    pub fn a_range(&self) -> std::ops::Range<usize> {
        self.k..self.k + self.k * self.k
    }

    pub fn b_range(&self) -> std::ops::Range<usize> {
        let s = self.k + self.k * self.k;
        s..s + self.k * self.k
    }

    pub fn ca_range(&self) -> Option<std::ops::Range<usize>> {
        if !self.multiplicative {
            return None;
        }
        let s = self.k + 2 * self.k * self.k;
        Some(s..s + self.k)
    }

    pub fn cb_range(&self) -> Option<std::ops::Range<usize>> {
        self.ca_range().map(|r| r.end..r.end + self.k)
    }

    pub fn r0_range(&self) -> Option<std::ops::Range<usize>> {
        if !self.trainable_init {
            return None;
        }
        let end = self.len();
        Some(end - self.k..end)
    }
}

/// Flattened view of a model's trainable parameters with a stable layout;
/// flatten/unflatten round-trips exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: ParamLayout) -> Self {
        Self {
            data: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_model(model: &CoupledOuModel) -> Self {
        let layout = ParamLayout::for_model(model);
        let mut data = Vec::with_capacity(layout.len());
        data.extend_from_slice(&model.mu);
        data.extend_from_slice(&model.a_mat);
        data.extend_from_slice(&model.b_mat);
        if let OuForm::Multiplicative { a, b } = &model.form {
            data.extend_from_slice(a);
            data.extend_from_slice(b);
        }
        if let Some(r0) = &model.init_state {
            data.extend_from_slice(r0);
        }
        Self { layout, data }
    }

    /// Writes the flattened parameters back into a model of the same shape.
    pub fn apply_to(&self, model: &mut CoupledOuModel) -> Result<()> {
        if ParamLayout::for_model(model) != self.layout {
            return Err(Error::ShapeMismatch(
                "parameter layout disagrees with the model".into(),
            ));
        }
        model.mu.copy_from_slice(&self.data[self.layout.mu_range()]);
        model.a_mat.copy_from_slice(&self.data[self.layout.a_range()]);
        model.b_mat.copy_from_slice(&self.data[self.layout.b_range()]);
        if let OuForm::Multiplicative { a, b } = &mut model.form {
            a.copy_from_slice(&self.data[self.layout.ca_range().expect("mult layout")]);
            b.copy_from_slice(&self.data[self.layout.cb_range().expect("mult layout")]);
        }
        if let Some(r0) = &mut model.init_state {
            r0.copy_from_slice(&self.data[self.layout.r0_range().expect("init layout")]);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// gradient verification

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest relative error over the checked coordinates.
    pub max_rel_error: f64,
    /// Coordinates compared against central differences.
    pub checked: Vec<usize>,
    /// Coordinates skipped because an evaluation sat exactly on a kink.
    pub excluded: Vec<usize>,
}

/// Compares `grad` against central finite differences of `f` at `theta` on
/// the given coordinates. `f` returns the value and whether the evaluation
/// touched a kink; kinked coordinates are excluded, not failed.
pub fn check_gradient<F>(
    f: F,
    theta: &[f64],
    grad: &[f64],
    coords: &[usize],
    h: f64,
) -> Result<GradCheck>
where
    F: Fn(&[f64]) -> Result<(f64, bool)>,
{
    if grad.len() != theta.len() {
        return Err(Error::ShapeMismatch("gradient/parameter lengths differ".into()));
    }
    let mut out = GradCheck {
        max_rel_error: 0.0,
        checked: Vec::new(),
        excluded: Vec::new(),
    };
    let mut work = theta.to_vec();
    for &c in coords {
        work[c] = theta[c] + h;
        let (fp, kink_p) = f(&work)?;
        work[c] = theta[c] - h;
        let (fm, kink_m) = f(&work)?;
        work[c] = theta[c];
        if kink_p || kink_m {
            out.excluded.push(c);
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        let ad = grad[c];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
        out.max_rel_error = out.max_rel_error.max(rel);
        out.checked.push(c);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::CoupledOuModel;
    use approx::assert_relative_eq;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&[3.0]).unwrap();
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.val(y), &[9.0]);
        let g = t.backward(y).unwrap();
        assert_eq!(g.of(&t, x), &[6.0]);
    }

    #[test]
    fn abs_gradient_and_kinks() {
        for (x0, expect) in [(2.0, 1.0), (-2.0, -1.0)] {
            let mut t = Tape::new();
            let x = t.leaf(&[x0]).unwrap();
            let y = t.abs(x).unwrap();
            let g = t.backward(y).unwrap();
            assert_eq!(g.of(&t, x), &[expect]);
            assert!(!t.kink_touched());
        }
        let mut t = Tape::new();
        let x = t.leaf(&[0.0]).unwrap();
        let y = t.abs(x).unwrap();
        assert!(t.kink_touched());
        let g = t.backward(y).unwrap();
        assert_eq!(g.of(&t, x), &[0.0]);
    }

    #[test]
    fn lc_rotate_matvec_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(&[1.0, 2.0, 3.0]).unwrap();
        let r = t.rotate(x, 1).unwrap();
        assert_eq!(t.val(r), &[2.0, 3.0, 1.0]);
        let m = t
            .constant(&[1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0])
            .unwrap();
        let mv = t.matvec(m, r, 3, 3).unwrap();
        assert_eq!(t.val(mv), &[2.0, 6.0, 3.0]);
        let s = t.lc(&[(2.0, mv), (1.0, x)], -1.0).unwrap();
        assert_eq!(t.val(s), &[4.0, 13.0, 8.0]);
        // reduce to a scalar: root = s[0] + s[1] + s[2]
        let s0 = t.stack(&[(s, 0)]).unwrap();
        let s1 = t.stack(&[(s, 1)]).unwrap();
        let s2 = t.stack(&[(s, 2)]).unwrap();
        let root = t.lc(&[(1.0, s0), (1.0, s1), (1.0, s2)], 0.0).unwrap();
        assert_eq!(t.val(root), &[25.0]);
        let g = t.backward(root).unwrap();
        // root = sum(2 M rot(x) + x - 1); the rotation routes the column
        // sums of 2M = [2, 4, 6] back one slot -> [6, 2, 4]; plus ones.
        assert_eq!(g.of(&t, x), &[7.0, 3.0, 5.0]);
    }

    #[test]
    fn crps_node_matches_direct_evaluation() {
        let mut t = Tape::new();
        let members = [0.3, -1.2, 2.4, 0.9];
        let ens = t.leaf(&members).unwrap();
        let obs = t.constant(&[0.5]).unwrap();
        let node = t.scaled_crps(ens, obs, 1.0).unwrap();
        let direct = crate::crps::crps(&members, 0.5);
        assert_eq!(t.val(node)[0], direct);
        assert!(!t.kink_touched());
    }

    #[test]
    fn crps_gradient_matches_finite_differences() {
        let members = [0.3, -1.2, 2.4, 0.9];
        let obs = 0.45;
        let alpha = 0.7;
        let mut t = Tape::new();
        let ens = t.leaf(&members).unwrap();
        let o = t.constant(&[obs]).unwrap();
        let node = t.scaled_crps(ens, o, alpha).unwrap();
        let g = t.backward(node).unwrap();
        let grad = g.of(&t, ens).to_vec();
        let check = check_gradient(
            |m| Ok(crate::crps::scaled_crps_value_kink(m, obs, alpha)),
            &members,
            &grad,
            &[0, 1, 2, 3],
            1e-6,
        )
        .unwrap();
        assert!(check.excluded.is_empty());
        assert!(check.max_rel_error < 1e-6, "{}", check.max_rel_error);
    }

    #[test]
    fn crps_translation_gradients_sum_to_zero() {
        // Shifting members and observation together leaves the score fixed,
        // so the member gradients and the observation gradient must cancel.
        let mut t = Tape::new();
        let ens = t.leaf(&[0.3, -1.2, 2.4]).unwrap();
        let obs = t.leaf(&[0.5]).unwrap();
        let node = t.scaled_crps(ens, obs, 1.0).unwrap();
        let g = t.backward(node).unwrap();
        let total: f64 = g.of(&t, ens).iter().sum::<f64>() + g.of(&t, obs)[0];
        assert!(total.abs() < 1e-15);
    }

    #[test]
    fn gradient_scales_linearly() {
        let build = |scale: f64| -> (f64, f64) {
            let mut t = Tape::new();
            let x = t.leaf(&[1.7]).unwrap();
            let sq = t.mul(x, x).unwrap();
            let root = t.lc(&[(scale, sq)], 0.0).unwrap();
            let g = t.backward(root).unwrap();
            (t.val(root)[0], g.of(&t, x)[0])
        };
        let (v1, g1) = build(1.0);
        let (v3, g3) = build(3.0);
        assert_relative_eq!(v3, 3.0 * v1, epsilon = 1e-14);
        assert_relative_eq!(g3, 3.0 * g1, epsilon = 1e-14);
    }

    #[test]
    fn budget_violation_names_the_budget() {
        let mut t = Tape::with_budget(2);
        let a = t.leaf(&[1.0]).unwrap();
        let b = t.mul(a, a).unwrap();
        let err = t.mul(b, b).unwrap_err();
        match err {
            Error::TapeBudget { budget } => assert_eq!(budget, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn check_gradient_quadratic_is_tight() {
        let theta = [1.0, -2.0, 0.5];
        let f = |x: &[f64]| -> Result<(f64, bool)> {
            Ok((x.iter().map(|v| v * v).sum::<f64>(), false))
        };
        let grad: Vec<f64> = theta.iter().map(|v| 2.0 * v).collect();
        let check = check_gradient(f, &theta, &grad, &[0, 1, 2], 1e-5).unwrap();
        assert!(check.max_rel_error < 1e-9, "{}", check.max_rel_error);
    }

    #[test]
    fn check_gradient_excludes_kink_coordinates() {
        // |x| at x = h: the x - h probe evaluates exactly at the kink.
        let h = 1e-5;
        let theta = [h];
        let f = |x: &[f64]| -> Result<(f64, bool)> { Ok((x[0].abs(), x[0] == 0.0)) };
        let check = check_gradient(f, &theta, &[1.0], &[0], h).unwrap();
        assert_eq!(check.excluded, vec![0]);
        assert!(check.checked.is_empty());
    }

    #[test]
    fn param_vector_roundtrip_and_counts() {
        let modes: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let mut m = vec![0.0; 8];
                m[i] = 1.0;
                m
            })
            .collect();
        let mut add = CoupledOuModel::untrained(modes.clone(), false).unwrap();
        add.mu[3] = 0.25;
        add.a_mat[10] = -0.5;
        let pv = ParamVector::from_model(&add);
        assert_eq!(pv.data.len(), 8 + 64 + 64);
        let mut back = CoupledOuModel::untrained(modes.clone(), false).unwrap();
        pv.apply_to(&mut back).unwrap();
        assert_eq!(add, back);

        let mult = CoupledOuModel::untrained(modes.clone(), true).unwrap();
        let pv = ParamVector::from_model(&mult);
        assert_eq!(pv.data.len(), 8 + 64 + 64 + 16);
        let mut back = CoupledOuModel::untrained(modes.clone(), true).unwrap();
        pv.apply_to(&mut back).unwrap();
        assert_eq!(mult, back);

        // a trainable initial state adds K more entries (160 in total here)
        let mut with_init = CoupledOuModel::untrained(modes.clone(), true).unwrap();
        with_init.init_state = Some(vec![0.1; 8]);
        let pv = ParamVector::from_model(&with_init);
        assert_eq!(pv.data.len(), 160);
        let mut back = with_init.clone();
        back.init_state = Some(vec![0.0; 8]);
        pv.apply_to(&mut back).unwrap();
        assert_eq!(with_init, back);

        // layout mismatch is rejected
        let mut add_model = CoupledOuModel::untrained(modes, false).unwrap();
        assert!(pv.apply_to(&mut add_model).is_err());
    }
}
