//! Dense ADMM solver for `min ½xᵀPx + qᵀx  s.t.  lo ≤ Ax ≤ hi`.
//!
//! Operator splitting with over-relaxation and residual-balanced penalty
//! updates, followed by an active-set polish of the final iterate. The
//! factorization of the linear system is cached in a [`QpWorkspace`] and
//! reused across solves whose `P`, `A` and penalty are unchanged.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::model::{is_infinite_bound, INF};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl QpProblem {
    pub fn new(p: DMatrix<f64>, q: DVector<f64>, a: DMatrix<f64>, lo: DVector<f64>, hi: DVector<f64>) -> Self {
        let lo = lo.map(|v| v.max(-INF));
        let hi = hi.map(|v| v.min(INF));
        QpProblem { p, q, a, lo, hi }
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn check(&self) -> Result<(), String> {
        let n = self.n();
        if self.p.shape() != (n, n) {
            return Err(format!("P is {:?}, expected {n}x{n}", self.p.shape()));
        }
        if self.a.ncols() != n || self.lo.len() != self.rows() || self.hi.len() != self.rows() {
            return Err("constraint dimensions are inconsistent".into());
        }
        if (&self.p - self.p.transpose()).amax() > 1e-12 {
            return Err("P is not symmetric".into());
        }
        if self.lo.iter().zip(self.hi.iter()).any(|(l, h)| l > h) {
            return Err("lo > hi".into());
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIter,
    PrimalInfeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Constraint values `Ax` projected onto the bounds.
    pub z: DVector<f64>,
    /// Multipliers; positive on active upper bounds, negative on lower.
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adapt_interval: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            tol: 1e-9,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adapt_interval: 25,
            polish: true,
        }
    }
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const EQ_SCALE: f64 = 1e3;

struct Factorization {
    p: DMatrix<f64>,
    a: DMatrix<f64>,
    rho: DVector<f64>,
    sigma: f64,
    chol: Cholesky<f64, Dyn>,
}

/// Caller-owned scratch state for repeated solves.
#[derive(Default)]
pub struct QpWorkspace {
    factor: Option<Factorization>,
    factorizations: usize,
}

impl std::fmt::Debug for QpWorkspace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QpWorkspace").field("factorizations", &self.factorizations).finish()
    }
}

fn row_rho(prob: &QpProblem, rho: f64) -> DVector<f64> {
    DVector::from_iterator(
        prob.rows(),
        prob.lo.iter().zip(prob.hi.iter()).map(|(&l, &h)| {
            if is_infinite_bound(l) && is_infinite_bound(h) {
                RHO_MIN
            } else if l == h {
                rho * EQ_SCALE
            } else {
                rho
            }
        }),
    )
}

impl QpWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of matrix factorizations performed so far.
    pub fn factorizations(&self) -> usize {
        self.factorizations
    }

    fn factor(&mut self, prob: &QpProblem, rho: &DVector<f64>, sigma: f64) -> &Cholesky<f64, Dyn> {
        let reuse = matches!(&self.factor, Some(f) if f.sigma == sigma && f.rho == *rho && f.p == prob.p && f.a == prob.a);
        if !reuse {
            let n = prob.n();
            let mut k = &prob.p + DMatrix::identity(n, n) * sigma;
            for (i, row) in prob.a.row_iter().enumerate() {
                k += row.transpose() * row * rho[i];
            }
            let chol = Cholesky::new(k).expect("P + σI + AᵀρA is positive definite");
            self.factorizations += 1;
            self.factor = Some(Factorization {
                p: prob.p.clone(),
                a: prob.a.clone(),
                rho: rho.clone(),
                sigma,
                chol,
            });
        }
        &self.factor.as_ref().unwrap().chol
    }

    pub fn solve(&mut self, prob: &QpProblem, warm: Option<&QpSolution>, settings: &QpSettings) -> QpSolution {
        let n = prob.n();
        let rows = prob.rows();
        let tol = settings.tol;

        let (mut x, mut z, mut y) = match warm {
            Some(w) if w.x.len() == n && w.z.len() == rows && w.y.len() == rows => {
                (w.x.clone(), w.z.clone(), w.y.clone())
            }
            _ => (DVector::zeros(n), DVector::zeros(rows), DVector::zeros(rows)),
        };
        let mut rho_scalar = settings.rho;
        let mut rho = row_rho(prob, rho_scalar);
        let sigma = settings.sigma;
        let alpha = settings.alpha;

        let mut status = QpStatus::MaxIter;
        let mut iterations = 0;
        let (mut r_prim, mut r_dual) = residuals(prob, &x, &z, &y);
        if r_prim <= tol && r_dual <= tol && warm.is_some() {
            status = QpStatus::Solved;
        }

        while status == QpStatus::MaxIter && iterations < settings.max_iter {
            iterations += 1;
            let rhs = &x * sigma - &prob.q + prob.a.transpose() * (rho.component_mul(&z) - &y);
            let x_tilde = self.factor(prob, &rho, sigma).solve(&rhs);
            let z_tilde = &prob.a * &x_tilde;

            let x_next = &x_tilde * alpha + &x * (1.0 - alpha);
            let z_relax = &z_tilde * alpha + &z * (1.0 - alpha);
            let mut z_next = DVector::zeros(rows);
            for i in 0..rows {
                z_next[i] = (z_relax[i] + y[i] / rho[i]).clamp(prob.lo[i], prob.hi[i]);
            }
            let y_next = &y + rho.component_mul(&(&z_relax - &z_next));
            let dy = &y_next - &y;
            x = x_next;
            z = z_next;
            y = y_next;

            (r_prim, r_dual) = residuals(prob, &x, &z, &y);
            if r_prim <= tol && r_dual <= tol {
                status = QpStatus::Solved;
                break;
            }
            if rows > 0 && iterations % settings.adapt_interval == 0 {
                if primal_infeasible(prob, &dy, tol) {
                    status = QpStatus::PrimalInfeasible;
                    break;
                }
                let ax = &prob.a * &x;
                let prim_scale = ax.amax().max(z.amax()).max(1e-12);
                let dual_scale = (&prob.p * &x)
                    .amax()
                    .max((prob.a.transpose() * &y).amax())
                    .max(prob.q.amax())
                    .max(1e-12);
                let ratio = (r_prim / prim_scale) / (r_dual / dual_scale).max(1e-300);
                let next = if ratio > 10.0 {
                    rho_scalar * 2.0
                } else if ratio < 0.1 {
                    rho_scalar / 2.0
                } else {
                    rho_scalar
                };
                let next = next.clamp(RHO_MIN, RHO_MAX);
                if next != rho_scalar {
                    rho_scalar = next;
                    rho = row_rho(prob, rho_scalar);
                }
            }
        }

        let mut solution = QpSolution {
            x,
            z,
            y,
            status,
            primal_residual: r_prim,
            dual_residual: r_dual,
            iterations,
        };
        if settings.polish && solution.status != QpStatus::PrimalInfeasible {
            if let Some(polished) = polish(prob, &solution, tol) {
                solution = polished;
            }
        }
        solution
    }
}

/// Solve `prob` to absolute KKT tolerance `tol` with a fresh workspace.
pub fn qp_solve(prob: &QpProblem, warm: Option<&QpSolution>, tol: f64) -> QpSolution {
    QpWorkspace::new().solve(prob, warm, &QpSettings { tol, ..QpSettings::default() })
}

fn residuals(prob: &QpProblem, x: &DVector<f64>, z: &DVector<f64>, y: &DVector<f64>) -> (f64, f64) {
    let ax = &prob.a * x;
    let r_prim = if prob.rows() == 0 { 0.0 } else { (&ax - z).amax() };
    let r_dual = (&prob.p * x + &prob.q + prob.a.transpose() * y).amax();
    (r_prim, r_dual)
}

fn primal_infeasible(prob: &QpProblem, dy: &DVector<f64>, tol: f64) -> bool {
    let norm = dy.amax();
    if norm <= 1e-12 {
        return false;
    }
    let eps = tol.max(1e-7) * norm;
    if (prob.a.transpose() * dy).amax() > eps {
        return false;
    }
    let mut support = 0.0;
    for i in 0..prob.rows() {
        let d = dy[i];
        if d > 0.0 {
            if is_infinite_bound(prob.hi[i]) {
                return false;
            }
            support += prob.hi[i] * d;
        } else if d < 0.0 {
            if is_infinite_bound(prob.lo[i]) {
                return false;
            }
            support += prob.lo[i] * d;
        }
    }
    support < -eps
}

/// Solve the equality-constrained KKT system on the guessed active set and
/// keep the result when it is a better KKT point.
fn polish(prob: &QpProblem, sol: &QpSolution, tol: f64) -> Option<QpSolution> {
    let n = prob.n();
    let mut active = Vec::new();
    for i in 0..prob.rows() {
        let (lo, hi) = (prob.lo[i], prob.hi[i]);
        if lo == hi {
            active.push((i, lo));
        } else if !is_infinite_bound(lo) && sol.z[i] - lo < -sol.y[i] {
            active.push((i, lo));
        } else if !is_infinite_bound(hi) && hi - sol.z[i] < sol.y[i] {
            active.push((i, hi));
        }
    }
    let na = active.len();
    let delta = 1e-9;
    let mut kkt = DMatrix::zeros(n + na, n + na);
    kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
    let mut rhs = DVector::zeros(n + na);
    rhs.rows_mut(0, n).copy_from(&(-&prob.q));
    for (r, &(i, b)) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = prob.a[(i, j)];
            kkt[(j, n + r)] = prob.a[(i, j)];
        }
        rhs[n + r] = b;
    }
    let mut reg = kkt.clone();
    for j in 0..n {
        reg[(j, j)] += delta;
    }
    for r in 0..na {
        reg[(n + r, n + r)] -= delta;
    }
    let lu = reg.lu();
    let mut sol_vec = lu.solve(&rhs)?;
    for _ in 0..5 {
        let err = &rhs - &kkt * &sol_vec;
        sol_vec += lu.solve(&err)?;
    }
    let x = sol_vec.rows(0, n).into_owned();
    let mut y = DVector::zeros(prob.rows());
    for (r, &(i, b)) in active.iter().enumerate() {
        let mult = sol_vec[n + r];
        if prob.lo[i] != prob.hi[i] {
            // sign must match the bound that is active
            let at_upper = b == prob.hi[i];
            if (at_upper && mult < -tol) || (!at_upper && mult > tol) {
                return None;
            }
        }
        y[i] = mult;
    }
    let ax = &prob.a * &x;
    let z = DVector::from_iterator(prob.rows(), (0..prob.rows()).map(|i| ax[i].clamp(prob.lo[i], prob.hi[i])));
    let (r_prim, r_dual) = residuals(prob, &x, &z, &y);
    let worst = r_prim.max(r_dual);
    let before = sol.primal_residual.max(sol.dual_residual);
    if !(worst <= tol.max(before)) {
        return None;
    }
    Some(QpSolution {
        x,
        z,
        y,
        status: if worst <= tol { QpStatus::Solved } else { sol.status },
        primal_residual: r_prim,
        dual_residual: r_dual,
        iterations: sol.iterations,
    })
}
