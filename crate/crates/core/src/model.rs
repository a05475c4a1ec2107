//! Declarative description of a latent factor fitting problem.
//!
//! A [`ModelSpec`] lists one [`LossAtom`] and one constraint set per factor,
//! plus regularizers attached to either the parameter block or the factor
//! block. Every loss is an outer convex atom applied to an affine map of the
//! parameter vector, which [`validate`] certifies with the usual composition
//! rules before anything is solved.

use serde::{Deserialize, Serialize};

use crate::error::{DlfmError, Result};
use crate::fsolve::{FactorMatrix, LossMatrix};
use crate::kernels::project::project;

/// Magnitude at or beyond which a bound is treated as infinite.
pub const INF: f64 = 1e30;

pub(crate) fn is_infinite_bound(v: f64) -> bool {
    v.abs() >= INF
}

// ---------------------------------------------------------------------------
// Curvature bookkeeping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Curvature {
    Constant,
    Affine,
    Convex,
    Concave,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monotonicity {
    Nondecreasing,
    Nonincreasing,
    NonMonotone,
}

impl Curvature {
    pub fn is_convex(self) -> bool {
        matches!(self, Curvature::Constant | Curvature::Affine | Curvature::Convex)
    }

    pub fn is_concave(self) -> bool {
        matches!(self, Curvature::Constant | Curvature::Affine | Curvature::Concave)
    }

    /// Curvature of a sum.
    pub fn add(self, other: Curvature) -> Curvature {
        use Curvature::*;
        match (self, other) {
            (Constant, c) | (c, Constant) => c,
            (Affine, Affine) => Affine,
            (a, b) if a.is_convex() && b.is_convex() => Convex,
            (a, b) if a.is_concave() && b.is_concave() => Concave,
            _ => Unknown,
        }
    }

    pub fn negate(self) -> Curvature {
        match self {
            Curvature::Convex => Curvature::Concave,
            Curvature::Concave => Curvature::Convex,
            c => c,
        }
    }
}

/// Curvature of `outer(inner(θ))` under the composition rules.
pub fn compose(outer: Curvature, monotonicity: Monotonicity, inner: Curvature) -> Curvature {
    use Curvature::*;
    use Monotonicity::*;
    if inner == Constant {
        return Constant;
    }
    match outer {
        Constant => Constant,
        Affine => match (inner, monotonicity) {
            (Affine, _) => Affine,
            (Convex, Nondecreasing) | (Concave, Nonincreasing) => Convex,
            (Concave, Nondecreasing) | (Convex, Nonincreasing) => Concave,
            _ => Unknown,
        },
        Convex => match (inner, monotonicity) {
            (Affine, _) => Convex,
            (Convex, Nondecreasing) | (Concave, Nonincreasing) => Convex,
            _ => Unknown,
        },
        Concave => match (inner, monotonicity) {
            (Affine, _) => Concave,
            (Concave, Nondecreasing) | (Convex, Nonincreasing) => Concave,
            _ => Unknown,
        },
        Unknown => Unknown,
    }
}

// ---------------------------------------------------------------------------
// Loss atoms
// ---------------------------------------------------------------------------

/// How a sample's feature acts on the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    /// `x · θ` for a feature vector `x`.
    InnerProduct,
    /// `X θ` for a feature matrix `X` with one row per class or output.
    MatrixVector,
    /// `θ − x − y`, the location map used by the squared distance.
    Translation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    SquareRegression,
    /// `‖Xθ − y‖_p`; an order at or beyond [`INF`] is the max-norm.
    LpRegression { order: f64 },
    Huber { delta: f64 },
    SquaredDistance,
    MultinomialLogit,
    BinaryLogit,
}

/// Observation layout a loss expects for each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationKind {
    /// One real per feature row.
    Real,
    /// A single real offset.
    Scalar,
    /// A one-hot vector with one entry per feature row.
    OneHot,
    /// A single label in {0, 1}.
    Binary,
}

impl LossKind {
    pub fn observation_kind(&self) -> ObservationKind {
        match self {
            LossKind::SquareRegression | LossKind::LpRegression { .. } | LossKind::Huber { .. } => {
                ObservationKind::Real
            }
            LossKind::SquaredDistance => ObservationKind::Scalar,
            LossKind::MultinomialLogit => ObservationKind::OneHot,
            LossKind::BinaryLogit => ObservationKind::Binary,
        }
    }

    /// Curvature and monotonicity of the outer atom.
    fn outer_atom(&self) -> (Curvature, Monotonicity) {
        match *self {
            LossKind::LpRegression { order } if !(order >= 1.0) => {
                (Curvature::Unknown, Monotonicity::NonMonotone)
            }
            LossKind::Huber { delta } if !(delta > 0.0) => {
                (Curvature::Unknown, Monotonicity::NonMonotone)
            }
            _ => (Curvature::Convex, Monotonicity::NonMonotone),
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self, LossKind::LpRegression { .. })
    }

    /// Losses whose weighted sum is a convex quadratic in θ.
    pub fn is_quadratic(&self) -> bool {
        matches!(self, LossKind::SquareRegression | LossKind::SquaredDistance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossAtom {
    pub kind: LossKind,
    /// Explicit feature map; inferred from the data shape when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<FeatureMap>,
}

impl From<LossKind> for LossAtom {
    fn from(kind: LossKind) -> Self {
        LossAtom { kind, map: None }
    }
}

impl LossAtom {
    pub fn new(kind: LossKind) -> Self {
        kind.into()
    }

    pub fn with_map(mut self, map: FeatureMap) -> Self {
        self.map = Some(map);
        self
    }

    pub fn square() -> Self {
        LossKind::SquareRegression.into()
    }

    pub fn squared_distance() -> Self {
        LossKind::SquaredDistance.into()
    }

    pub fn huber(delta: f64) -> Self {
        LossKind::Huber { delta }.into()
    }

    pub fn lp(order: f64) -> Self {
        LossKind::LpRegression { order }.into()
    }

    pub fn multinomial_logit() -> Self {
        LossKind::MultinomialLogit.into()
    }

    pub fn binary_logit() -> Self {
        LossKind::BinaryLogit.into()
    }

    /// The feature map in effect for samples with `rows` feature rows.
    pub fn resolved_map(&self, rows: usize) -> FeatureMap {
        if let Some(map) = self.map {
            return map;
        }
        match self.kind {
            LossKind::SquaredDistance => FeatureMap::Translation,
            LossKind::MultinomialLogit => FeatureMap::MatrixVector,
            LossKind::BinaryLogit => FeatureMap::InnerProduct,
            _ if rows > 1 => FeatureMap::MatrixVector,
            _ => FeatureMap::InnerProduct,
        }
    }

    /// Curvature of the loss in θ with data fixed.
    pub fn curvature(&self, rows: usize) -> Curvature {
        let inner = match self.resolved_map(rows) {
            FeatureMap::InnerProduct | FeatureMap::MatrixVector | FeatureMap::Translation => {
                Curvature::Affine
            }
        };
        let (outer, mono) = self.kind.outer_atom();
        let composed = compose(outer, mono, inner);
        match self.kind {
            // log-sum-exp(u) − y·u and softplus(u) − y·u: convex atom plus an affine term
            LossKind::MultinomialLogit | LossKind::BinaryLogit => composed.add(Curvature::Affine),
            _ => composed,
        }
    }

    /// Loss value at θ; accumulates `weight · ∇` into `grad` when given.
    ///
    /// `x` holds `rows · n` feature entries row-major and `y` the sample's
    /// observation.
    pub(crate) fn accumulate(
        &self,
        x: &[f64],
        rows: usize,
        y: &[f64],
        theta: &[f64],
        weight: f64,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let n = theta.len();
        let mut stack = [0.0f64; 16];
        let mut heap;
        let u: &mut [f64] = if rows <= stack.len() {
            &mut stack[..rows]
        } else {
            heap = vec![0.0; rows];
            &mut heap
        };
        if !matches!(self.kind, LossKind::SquaredDistance) {
            for (r, ur) in u.iter_mut().enumerate() {
                *ur = dot(&x[r * n..(r + 1) * n], theta);
            }
        }

        // coefficient per row of d loss / d u_r, then grad = Σ_r coef_r x_r
        let value = match self.kind {
            LossKind::SquareRegression => {
                let mut f = 0.0;
                for (r, ur) in u.iter_mut().enumerate() {
                    *ur -= y[r];
                    f += *ur * *ur;
                    *ur *= 2.0;
                }
                f
            }
            LossKind::LpRegression { order } => {
                for (r, ur) in u.iter_mut().enumerate() {
                    *ur -= y[r];
                }
                lp_value_and_coef(u, order)
            }
            LossKind::Huber { delta } => {
                let mut f = 0.0;
                for (r, ur) in u.iter_mut().enumerate() {
                    let res = *ur - y[r];
                    if res.abs() <= delta {
                        f += res * res;
                        *ur = 2.0 * res;
                    } else {
                        f += 2.0 * delta * res.abs() - delta * delta;
                        *ur = 2.0 * delta * res.signum();
                    }
                }
                f
            }
            LossKind::SquaredDistance => {
                let offset = y[0];
                let mut f = 0.0;
                match grad {
                    Some(g) => {
                        for j in 0..n {
                            let d = theta[j] - x[j] - offset;
                            f += d * d;
                            g[j] += weight * 2.0 * d;
                        }
                    }
                    None => {
                        for j in 0..n {
                            let d = theta[j] - x[j] - offset;
                            f += d * d;
                        }
                    }
                }
                return f;
            }
            LossKind::MultinomialLogit => {
                let max = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for ur in u.iter() {
                    denom += (ur - max).exp();
                }
                let lse = max + denom.ln();
                let yu: f64 = u.iter().zip(y).map(|(a, b)| a * b).sum();
                for (r, ur) in u.iter_mut().enumerate() {
                    *ur = (*ur - max).exp() / denom - y[r];
                }
                lse - yu
            }
            LossKind::BinaryLogit => {
                let s = u[0];
                let f = softplus(s) - y[0] * s;
                u[0] = sigmoid(s) - y[0];
                f
            }
        };
        if let Some(g) = grad {
            for (r, coef) in u.iter().enumerate() {
                if *coef == 0.0 {
                    continue;
                }
                let c = weight * coef;
                for (gj, xj) in g.iter_mut().zip(&x[r * n..(r + 1) * n]) {
                    *gj += c * xj;
                }
            }
        }
        value
    }

    pub(crate) fn value(&self, x: &[f64], rows: usize, y: &[f64], theta: &[f64]) -> f64 {
        self.accumulate(x, rows, y, theta, 0.0, None)
    }

    /// Upper bound on the Hessian in terms of `Σ w XᵀX`, when one exists.
    pub(crate) fn curvature_scale(&self) -> Option<f64> {
        match self.kind {
            LossKind::SquareRegression | LossKind::Huber { .. } | LossKind::SquaredDistance => {
                Some(2.0)
            }
            LossKind::MultinomialLogit => Some(0.5),
            LossKind::BinaryLogit => Some(0.25),
            LossKind::LpRegression { .. } => None,
        }
    }
}

fn lp_value_and_coef(u: &mut [f64], order: f64) -> f64 {
    if is_infinite_bound(order) || order.is_infinite() {
        let mut best = 0;
        let mut best_abs = 0.0;
        for (r, ur) in u.iter().enumerate() {
            if ur.abs() > best_abs {
                best_abs = ur.abs();
                best = r;
            }
        }
        let sign = u[best].signum();
        for (r, ur) in u.iter_mut().enumerate() {
            *ur = if r == best && best_abs > 0.0 { sign } else { 0.0 };
        }
        return best_abs;
    }
    if order == 1.0 {
        let mut f = 0.0;
        for ur in u.iter_mut() {
            f += ur.abs();
            *ur = if *ur == 0.0 { 0.0 } else { ur.signum() };
        }
        return f;
    }
    let norm = u.iter().map(|v| v.abs().powf(order)).sum::<f64>().powf(1.0 / order);
    if norm == 0.0 {
        u.iter_mut().for_each(|v| *v = 0.0);
        return 0.0;
    }
    let scale = norm.powf(order - 1.0);
    for ur in u.iter_mut() {
        *ur = if *ur == 0.0 { 0.0 } else { ur.signum() * ur.abs().powf(order - 1.0) / scale };
    }
    norm
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Constraint and regularizer atoms
// ---------------------------------------------------------------------------

/// A closed convex set; atoms listed for one factor are intersected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintAtom {
    Free,
    Nonneg,
    Nonpos,
    /// Per-coordinate bounds; magnitudes at or beyond [`INF`] are unbounded.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// `{θ : Aθ ≤ b}` with `A` given row by row.
    Polyhedron { a: Vec<Vec<f64>>, b: Vec<f64> },
    MonotoneNonincreasing,
    MonotoneNondecreasing,
    NormBall2 { radius: f64 },
    SumEquals { value: f64 },
}

/// One linear row `lo ≤ a·θ ≤ hi`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LinearRow {
    pub coef: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
}

impl ConstraintAtom {
    /// Largest amount by which `x` violates the set.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let n = x.len();
        match self {
            ConstraintAtom::Free => 0.0,
            ConstraintAtom::Nonneg => x.iter().map(|v| (-v).max(0.0)).fold(0.0, f64::max),
            ConstraintAtom::Nonpos => x.iter().map(|v| v.max(0.0)).fold(0.0, f64::max),
            ConstraintAtom::Box { lo, hi } => (0..n)
                .map(|j| (lo[j] - x[j]).max(x[j] - hi[j]).max(0.0))
                .fold(0.0, f64::max),
            ConstraintAtom::Polyhedron { a, b } => a
                .iter()
                .zip(b)
                .map(|(row, bi)| (dot(row, x) - bi).max(0.0))
                .fold(0.0, f64::max),
            ConstraintAtom::MonotoneNonincreasing => {
                x.windows(2).map(|w| (w[1] - w[0]).max(0.0)).fold(0.0, f64::max)
            }
            ConstraintAtom::MonotoneNondecreasing => {
                x.windows(2).map(|w| (w[0] - w[1]).max(0.0)).fold(0.0, f64::max)
            }
            ConstraintAtom::NormBall2 { radius } => {
                (x.iter().map(|v| v * v).sum::<f64>().sqrt() - radius).max(0.0)
            }
            ConstraintAtom::SumEquals { value } => (x.iter().sum::<f64>() - value).abs(),
        }
    }

    /// Linear description of the atom, or `None` for the norm ball.
    pub(crate) fn linear_rows(&self, n: usize) -> Option<Vec<LinearRow>> {
        let unit = |j: usize| {
            let mut c = vec![0.0; n];
            c[j] = 1.0;
            c
        };
        let rows = match self {
            ConstraintAtom::Free => Vec::new(),
            ConstraintAtom::Nonneg => {
                (0..n).map(|j| LinearRow { coef: unit(j), lo: 0.0, hi: INF }).collect()
            }
            ConstraintAtom::Nonpos => {
                (0..n).map(|j| LinearRow { coef: unit(j), lo: -INF, hi: 0.0 }).collect()
            }
            ConstraintAtom::Box { lo, hi } => (0..n)
                .filter(|&j| !is_infinite_bound(lo[j]) || !is_infinite_bound(hi[j]))
                .map(|j| LinearRow {
                    coef: unit(j),
                    lo: lo[j].max(-INF),
                    hi: hi[j].min(INF),
                })
                .collect(),
            ConstraintAtom::Polyhedron { a, b } => a
                .iter()
                .zip(b)
                .map(|(row, bi)| LinearRow { coef: row.clone(), lo: -INF, hi: *bi })
                .collect(),
            ConstraintAtom::MonotoneNonincreasing | ConstraintAtom::MonotoneNondecreasing => {
                let sign = if matches!(self, ConstraintAtom::MonotoneNonincreasing) { 1.0 } else { -1.0 };
                (0..n.saturating_sub(1))
                    .map(|j| {
                        // nonincreasing: θ_{j+1} − θ_j ≤ 0
                        let mut c = vec![0.0; n];
                        c[j + 1] = sign;
                        c[j] = -sign;
                        LinearRow { coef: c, lo: -INF, hi: 0.0 }
                    })
                    .collect()
            }
            ConstraintAtom::NormBall2 { .. } => return None,
            ConstraintAtom::SumEquals { value } => {
                vec![LinearRow { coef: vec![1.0; n], lo: *value, hi: *value }]
            }
        };
        Some(rows)
    }

    fn check(&self, n: usize, path: &str, report: &mut ValidationReport) {
        let finite = |v: f64| v.is_finite();
        match self {
            ConstraintAtom::Box { lo, hi } => {
                if lo.len() != n || hi.len() != n {
                    report.push(path, format!("box bounds must have length {n}"));
                } else if lo.iter().chain(hi).any(|v| v.is_nan()) {
                    report.push(path, "box bounds must not be NaN");
                } else if lo.iter().zip(hi).any(|(l, h)| l > h) {
                    report.push(path, "box requires lo <= hi");
                }
            }
            ConstraintAtom::Polyhedron { a, b } => {
                if a.len() != b.len() {
                    report.push(format!("{path}.b"), format!("expected {} entries, found {}", a.len(), b.len()));
                }
                if a.iter().any(|row| row.len() != n) {
                    report.push(format!("{path}.a"), format!("every row must have {n} columns"));
                }
                if a.iter().flatten().chain(b).any(|v| !finite(*v)) {
                    report.push(path, "polyhedron data must be finite");
                }
            }
            ConstraintAtom::NormBall2 { radius } => {
                if !(*radius > 0.0) || !radius.is_finite() {
                    report.push(format!("{path}.radius"), "radius must be > 0");
                }
            }
            ConstraintAtom::SumEquals { value } => {
                if !value.is_finite() {
                    report.push(format!("{path}.value"), "value must be finite");
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegularizerAtom {
    /// `λ Σ_k ‖θ_k‖₁` on the parameter block.
    L1 { weight: f64 },
    /// `λ Σ_k ‖θ_k‖₂` on the parameter block.
    GroupL2 { weight: f64 },
    /// `λ Σ_t D_kl(z_t, z_{t+1})` on the factor block of ordered data.
    KlChain { weight: f64 },
}

impl RegularizerAtom {
    pub fn weight(&self) -> f64 {
        match *self {
            RegularizerAtom::L1 { weight }
            | RegularizerAtom::GroupL2 { weight }
            | RegularizerAtom::KlChain { weight } => weight,
        }
    }

    pub fn is_parameter_side(&self) -> bool {
        !matches!(self, RegularizerAtom::KlChain { .. })
    }

    /// Value of a parameter-side regularizer on one factor's block.
    pub(crate) fn block_value(&self, theta: &[f64]) -> f64 {
        match *self {
            RegularizerAtom::L1 { weight } => weight * theta.iter().map(|v| v.abs()).sum::<f64>(),
            RegularizerAtom::GroupL2 { weight } => {
                weight * theta.iter().map(|v| v * v).sum::<f64>().sqrt()
            }
            RegularizerAtom::KlChain { .. } => 0.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Problem and data
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Controls {
    /// Termination threshold on the P/F gap, or on the relative objective
    /// change when regularizers are present.
    pub eps: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub seed: u64,
    pub qp_tol: f64,
    pub qp_max_iter: usize,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub f_tol: f64,
    pub f_max_iter: usize,
}

impl Default for Controls {
    fn default() -> Self {
        Controls {
            eps: 1e-6,
            max_iter: 500,
            restarts: 10,
            seed: 0,
            qp_tol: 1e-9,
            qp_max_iter: 20_000,
            inner_tol: 1e-10,
            inner_max_iter: 5_000,
            f_tol: 1e-9,
            f_max_iter: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub k: usize,
    pub n: usize,
    pub losses: Vec<LossAtom>,
    pub constraints: Vec<Vec<ConstraintAtom>>,
    pub p_regularizers: Vec<RegularizerAtom>,
    pub f_regularizers: Vec<RegularizerAtom>,
    pub controls: Controls,
}

impl ModelSpec {
    /// `k` factors sharing one loss, unconstrained and unregularized.
    pub fn new(k: usize, n: usize, loss: impl Into<LossAtom>) -> Self {
        let loss = loss.into();
        ModelSpec {
            k,
            n,
            losses: vec![loss; k],
            constraints: vec![Vec::new(); k],
            p_regularizers: Vec::new(),
            f_regularizers: Vec::new(),
            controls: Controls::default(),
        }
    }

    pub fn with_shared_constraints(mut self, atoms: Vec<ConstraintAtom>) -> Self {
        self.constraints = vec![atoms; self.k];
        self
    }

    pub fn with_factor_constraints(mut self, factor: usize, atoms: Vec<ConstraintAtom>) -> Self {
        self.constraints[factor] = atoms;
        self
    }

    pub fn with_p_regularizer(mut self, reg: RegularizerAtom) -> Self {
        self.p_regularizers.push(reg);
        self
    }

    pub fn with_f_regularizer(mut self, reg: RegularizerAtom) -> Self {
        self.f_regularizers.push(reg);
        self
    }

    pub fn with_controls(mut self, controls: Controls) -> Self {
        self.controls = controls;
        self
    }

    pub fn has_regularizers(&self) -> bool {
        self.p_regularizers.iter().chain(&self.f_regularizers).any(|r| r.weight() > 0.0)
    }

    /// Total KL-chain weight on the factor block.
    pub fn kl_weight(&self) -> f64 {
        self.f_regularizers
            .iter()
            .filter_map(|r| match r {
                RegularizerAtom::KlChain { weight } => Some(*weight),
                _ => None,
            })
            .sum()
    }

    /// Parameter-side regularizer value summed over factors.
    pub fn p_regularizer_value(&self, thetas: &[Vec<f64>]) -> f64 {
        self.p_regularizers
            .iter()
            .map(|reg| thetas.iter().map(|t| reg.block_value(t)).sum::<f64>())
            .sum()
    }

    /// Factor-side regularizer value.
    pub fn f_regularizer_value(&self, z: &FactorMatrix) -> f64 {
        let w = self.kl_weight();
        if w == 0.0 {
            0.0
        } else {
            w * kl_chain(z)
        }
    }
}

/// Feature-observation pairs.
///
/// Each sample's feature is a `rows × n` block stored row-major; vector
/// features have `rows == 1`. Observations have a fixed width per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    m: usize,
    rows: usize,
    n: usize,
    features: Vec<f64>,
    obs_width: usize,
    observations: Vec<f64>,
    ordered: bool,
}

impl Dataset {
    pub fn new(
        m: usize,
        rows: usize,
        n: usize,
        features: Vec<f64>,
        obs_width: usize,
        observations: Vec<f64>,
    ) -> Result<Self> {
        if features.len() != m * rows * n {
            return Err(DlfmError::Shape(format!(
                "features: expected {} entries for {m}x{rows}x{n}, found {}",
                m * rows * n,
                features.len()
            )));
        }
        if observations.len() != m * obs_width {
            return Err(DlfmError::Shape(format!(
                "observations: expected {} entries, found {}",
                m * obs_width,
                observations.len()
            )));
        }
        Ok(Dataset { m, rows, n, features, obs_width, observations, ordered: false })
    }

    /// Vector features with one scalar observation each.
    pub fn from_vectors(features: &[Vec<f64>], observations: &[f64]) -> Result<Self> {
        let m = features.len();
        let n = features.first().map_or(0, |f| f.len());
        if features.iter().any(|f| f.len() != n) {
            return Err(DlfmError::Shape("feature vectors differ in length".into()));
        }
        Dataset::new(m, 1, n, features.concat(), 1, observations.to_vec())
    }

    pub fn ordered(mut self, ordered: bool) -> Self {
        self.ordered = ordered;
        self
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn obs_width(&self) -> usize {
        self.obs_width
    }

    pub fn is_ordered(&self) -> bool {
        self.ordered
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        let len = self.rows * self.n;
        &self.features[i * len..(i + 1) * len]
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        &self.observations[i * self.obs_width..(i + 1) * self.obs_width]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    fn check_observations(&self, kind: ObservationKind, path: &str, report: &mut ValidationReport) {
        let expected = match kind {
            ObservationKind::Real | ObservationKind::OneHot => self.rows,
            ObservationKind::Scalar | ObservationKind::Binary => 1,
        };
        if self.obs_width != expected {
            report.push(
                path,
                format!("observation width {} does not match expected {expected}", self.obs_width),
            );
            return;
        }
        for i in 0..self.m {
            let y = self.observation(i);
            let bad = match kind {
                ObservationKind::Real | ObservationKind::Scalar => y.iter().any(|v| !v.is_finite()),
                ObservationKind::Binary => y[0] != 0.0 && y[0] != 1.0,
                ObservationKind::OneHot => {
                    y.iter().any(|v| *v != 0.0 && *v != 1.0) || y.iter().sum::<f64>() != 1.0
                }
            };
            if bad {
                let what = match kind {
                    ObservationKind::OneHot => "must be a one-hot vector",
                    ObservationKind::Binary => "must be 0 or 1",
                    _ => "must be finite",
                };
                report.push(format!("observations[{i}]"), what.to_string());
                return;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation { path: path.into(), message: message.into() });
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(DlfmError::Validation(self))
        }
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{}: {}", v.path, v.message)?;
        }
        Ok(())
    }
}

/// Check that `spec` is well formed for `data` and that every loss composes
/// to a convex function of θ.
pub fn validate(spec: &ModelSpec, data: &Dataset) -> ValidationReport {
    let mut report = ValidationReport::default();
    if spec.k == 0 {
        report.push("k", "k must be >= 1");
    }
    if spec.n == 0 {
        report.push("n", "n must be >= 1");
    }
    if spec.losses.len() != spec.k {
        report.push("losses", format!("expected {} entries, found {}", spec.k, spec.losses.len()));
    }
    if spec.constraints.len() != spec.k {
        report.push(
            "constraints",
            format!("expected {} entries, found {}", spec.k, spec.constraints.len()),
        );
    }
    let c = &spec.controls;
    if !(c.eps >= 0.0) || !c.eps.is_finite() {
        report.push("controls.eps", "eps must be >= 0");
    }
    if c.max_iter == 0 {
        report.push("controls.max_iter", "max_iter must be >= 1");
    }
    if c.restarts == 0 {
        report.push("controls.restarts", "restarts must be >= 1");
    }
    for (name, v) in [("qp_tol", c.qp_tol), ("inner_tol", c.inner_tol), ("f_tol", c.f_tol)] {
        if !(v > 0.0) {
            report.push(format!("controls.{name}"), format!("{name} must be > 0"));
        }
    }

    if data.m == 0 {
        report.push("data.m", "dataset must contain at least one sample");
    }
    if data.n != spec.n {
        report.push("data.n", format!("feature dimension {} does not match n = {}", data.n, spec.n));
    }
    if data.features.iter().any(|v| !v.is_finite()) {
        report.push("data.features", "features must be finite");
    }

    for (k, loss) in spec.losses.iter().enumerate() {
        let path = format!("losses[{k}]");
        match loss.kind {
            LossKind::Huber { delta } if !(delta > 0.0) => {
                report.push(format!("{path}.delta"), "delta must be > 0");
            }
            LossKind::LpRegression { order } if !(order >= 1.0) => {
                report.push(format!("{path}.order"), "order must be >= 1");
            }
            _ => {}
        }
        let map = loss.resolved_map(data.rows);
        let map_ok = match (loss.kind, map) {
            (LossKind::SquaredDistance, FeatureMap::Translation) => data.rows == 1,
            (LossKind::SquaredDistance, _) | (_, FeatureMap::Translation) => false,
            (LossKind::BinaryLogit, FeatureMap::InnerProduct) => data.rows == 1,
            (LossKind::BinaryLogit, _) => false,
            (_, FeatureMap::InnerProduct) => data.rows == 1,
            (_, FeatureMap::MatrixVector) => true,
        };
        if !map_ok {
            report.push(
                format!("{path}.map"),
                format!("{map:?} is incompatible with {:?} on {}-row features", loss.kind, data.rows),
            );
        }
        let curvature = loss.curvature(data.rows);
        if !curvature.is_convex() {
            report.push(path.clone(), format!("loss is not certifiably convex (curvature {curvature:?})"));
        }
        if spec.losses[..k].iter().all(|l| l.kind.observation_kind() != loss.kind.observation_kind()) {
            data.check_observations(loss.kind.observation_kind(), &path, &mut report);
        }
    }

    for (k, atoms) in spec.constraints.iter().enumerate() {
        let before = report.violations.len();
        for (j, atom) in atoms.iter().enumerate() {
            atom.check(spec.n, &format!("constraints[{k}][{j}]"), &mut report);
        }
        if report.violations.len() == before && !atoms.is_empty() && spec.n > 0 {
            let feasible = project(atoms, &vec![0.0; spec.n])
                .map(|x| atoms.iter().all(|a| a.violation(&x) <= 1e-6))
                .unwrap_or(false);
            if !feasible {
                report.push(format!("constraints[{k}]"), "feasible set is empty");
            }
        }
    }

    for (i, reg) in spec.p_regularizers.iter().enumerate() {
        let path = format!("p_regularizers[{i}]");
        if !(reg.weight() >= 0.0) || !reg.weight().is_finite() {
            report.push(format!("{path}.weight"), "weight must be >= 0");
        }
        if !reg.is_parameter_side() {
            report.push(path, "kl_chain regularizes factors and belongs in f_regularizers");
        }
    }
    for (i, reg) in spec.f_regularizers.iter().enumerate() {
        let path = format!("f_regularizers[{i}]");
        if !(reg.weight() >= 0.0) || !reg.weight().is_finite() {
            report.push(format!("{path}.weight"), "weight must be >= 0");
        }
        if reg.is_parameter_side() {
            report.push(path, "l1/group_l2 regularize parameters and belong in p_regularizers");
        } else if !data.ordered {
            report.push(path, "kl_chain requires ordered (time-series) data");
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn check_shapes(x: &[f64], rows: usize, y: &[f64], theta: &[f64], atom: &LossAtom) -> Result<()> {
    if rows == 0 || x.len() != rows * theta.len() {
        return Err(DlfmError::Shape(format!(
            "feature has {} entries, expected {rows} x {}",
            x.len(),
            theta.len()
        )));
    }
    let width = match atom.kind.observation_kind() {
        ObservationKind::Real | ObservationKind::OneHot => rows,
        ObservationKind::Scalar | ObservationKind::Binary => 1,
    };
    if y.len() != width {
        return Err(DlfmError::Shape(format!("observation has {} entries, expected {width}", y.len())));
    }
    if matches!(atom.kind, LossKind::SquaredDistance | LossKind::BinaryLogit) && rows != 1 {
        return Err(DlfmError::Shape(format!("{:?} takes vector features", atom.kind)));
    }
    Ok(())
}

/// `f(x, y; θ)` for a feature with `rows` rows.
pub fn loss_eval(atom: &LossAtom, x: &[f64], rows: usize, y: &[f64], theta: &[f64]) -> Result<f64> {
    check_shapes(x, rows, y, theta, atom)?;
    Ok(atom.value(x, rows, y, theta))
}

/// Gradient (or the minimal-norm subgradient at kinks) of [`loss_eval`].
pub fn loss_grad(atom: &LossAtom, x: &[f64], rows: usize, y: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    check_shapes(x, rows, y, theta, atom)?;
    let mut g = vec![0.0; theta.len()];
    atom.accumulate(x, rows, y, theta, 1.0, Some(&mut g));
    Ok(g)
}

/// The `m × K` matrix of per-sample, per-factor losses.
pub fn loss_matrix(spec: &ModelSpec, data: &Dataset, thetas: &[Vec<f64>]) -> LossMatrix {
    let k = spec.k;
    let mut values = vec![0.0; data.m * k];
    for i in 0..data.m {
        let (x, y) = (data.feature(i), data.observation(i));
        for (j, (loss, theta)) in spec.losses.iter().zip(thetas).enumerate() {
            values[i * k + j] = loss.value(x, data.rows, y, theta);
        }
    }
    LossMatrix::from_row_major(data.m, k, values)
}

/// Full relaxed objective `Σ z_i·r_i` plus both regularizer blocks.
pub fn objective(spec: &ModelSpec, data: &Dataset, thetas: &[Vec<f64>], z: &FactorMatrix) -> f64 {
    let r = loss_matrix(spec, data, thetas);
    objective_from_losses(spec, thetas, z, &r)
}

pub(crate) fn objective_from_losses(
    spec: &ModelSpec,
    thetas: &[Vec<f64>],
    z: &FactorMatrix,
    r: &LossMatrix,
) -> f64 {
    z.weighted_sum(r) + spec.p_regularizer_value(thetas) + spec.f_regularizer_value(z)
}

/// Generalized KL divergence `Σ u log(u/v) − u + v`, with `0 log 0 = 0`.
pub fn kl_divergence(u: &[f64], v: &[f64]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let t = if a == 0.0 {
                0.0
            } else if b == 0.0 {
                f64::INFINITY
            } else {
                a * (a / b).ln()
            };
            t - a + b
        })
        .sum()
}

/// `Σ_t D_kl(z_t, z_{t+1})` over consecutive rows.
pub fn kl_chain(z: &FactorMatrix) -> f64 {
    (1..z.rows()).map(|t| kl_divergence(z.row(t - 1), z.row(t))).sum()
}
