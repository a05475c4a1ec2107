//! Exact reference solvers for tiny instances.
//!
//! Nothing here depends on the iterative kernels: inner problems are solved
//! by normal equations or by enumerating active sets.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DlfmError, Result};
use crate::fsolve::Labels;
use crate::kernels::qp::QpProblem;
use crate::model::{is_infinite_bound, ConstraintAtom, Dataset, LossKind, ModelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub optimum: f64,
    pub best_assignment: Labels,
    pub thetas_at_optimum: Vec<Vec<f64>>,
}

pub const MAX_ASSIGNMENTS: u64 = 1_000_000;

/// Global optimum of the hard-assignment problem by enumerating all `K^m`
/// labelings.
pub fn brute_force_fit(spec: &ModelSpec, data: &Dataset) -> Result<OracleResult> {
    let (m, k) = (data.m(), spec.k);
    let total = (k as u64).checked_pow(m as u32).filter(|t| *t <= MAX_ASSIGNMENTS).ok_or_else(|| {
        DlfmError::InstanceTooLarge(format!("{k}^{m} assignments exceed {MAX_ASSIGNMENTS}"))
    })?;
    if spec.has_regularizers() {
        return Err(DlfmError::Unsupported("the oracle solves unregularized problems only".into()));
    }
    if data.rows() != 1 {
        return Err(DlfmError::Unsupported("the oracle takes vector features".into()));
    }
    let mut inner = Vec::with_capacity(k);
    for (loss, atoms) in spec.losses.iter().zip(&spec.constraints) {
        if !matches!(loss.kind, LossKind::SquareRegression | LossKind::SquaredDistance) {
            return Err(DlfmError::Unsupported(format!("no exact inner solve for {:?}", loss.kind)));
        }
        inner.push(InnerSolver::new(loss.kind, atoms, spec.n)?);
    }

    let best = (0..total)
        .into_par_iter()
        .map(|code| {
            let labels = decode(code, m, k);
            let mut value = 0.0;
            let mut thetas = Vec::with_capacity(k);
            for (j, solver) in inner.iter().enumerate() {
                let members: Vec<usize> = (0..m).filter(|&i| labels[i] == j).collect();
                let (theta, v) = solver.solve(data, &members);
                value += v;
                thetas.push(theta);
            }
            (value, code, labels, thetas)
        })
        .reduce_with(|a, b| if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a })
        .expect("at least one assignment");

    Ok(OracleResult {
        optimum: best.0,
        best_assignment: Labels(best.2.iter().map(|l| l + 1).collect()),
        thetas_at_optimum: best.3,
    })
}

fn decode(mut code: u64, m: usize, k: usize) -> Vec<usize> {
    let mut labels = vec![0; m];
    for l in labels.iter_mut() {
        *l = (code % k as u64) as usize;
        code /= k as u64;
    }
    labels
}

struct InnerSolver {
    kind: LossKind,
    n: usize,
    /// Stacked linear rows, or `None` when unconstrained.
    rows: Option<(DMatrix<f64>, DVector<f64>, DVector<f64>)>,
}

impl InnerSolver {
    fn new(kind: LossKind, atoms: &[ConstraintAtom], n: usize) -> Result<Self> {
        let mut coef = Vec::new();
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for atom in atoms {
            let rows = atom
                .linear_rows(n)
                .ok_or_else(|| DlfmError::Unsupported("the oracle handles linear constraints only".into()))?;
            for r in rows {
                coef.push(r.coef);
                lo.push(r.lo);
                hi.push(r.hi);
            }
        }
        let rows = if coef.is_empty() {
            None
        } else {
            Some((
                DMatrix::from_fn(coef.len(), n, |i, j| coef[i][j]),
                DVector::from_vec(lo),
                DVector::from_vec(hi),
            ))
        };
        Ok(InnerSolver { kind, n, rows })
    }

    fn value(&self, data: &Dataset, members: &[usize], theta: &[f64]) -> f64 {
        members
            .iter()
            .map(|&i| {
                let x = data.feature(i);
                let y = data.observation(i)[0];
                match self.kind {
                    LossKind::SquaredDistance => {
                        x.iter().zip(theta).map(|(xj, tj)| (tj - xj - y).powi(2)).sum::<f64>()
                    }
                    _ => {
                        let u: f64 = x.iter().zip(theta).map(|(a, b)| a * b).sum();
                        (u - y).powi(2)
                    }
                }
            })
            .sum()
    }

    fn solve(&self, data: &Dataset, members: &[usize]) -> (Vec<f64>, f64) {
        let n = self.n;
        let (p, q) = if members.is_empty() {
            // an unused factor contributes nothing; report the feasible point nearest 0
            (DMatrix::identity(n, n), DVector::zeros(n))
        } else {
            let mut p = DMatrix::zeros(n, n);
            let mut q = DVector::zeros(n);
            for &i in members {
                let x = DVector::from_column_slice(data.feature(i));
                let y = data.observation(i)[0];
                match self.kind {
                    LossKind::SquaredDistance => {
                        p += DMatrix::identity(n, n) * 2.0;
                        q -= x.add_scalar(y) * 2.0;
                    }
                    _ => {
                        p += &x * x.transpose() * 2.0;
                        q -= &x * (2.0 * y);
                    }
                }
            }
            (p, q)
        };
        let theta = match &self.rows {
            None => {
                let svd = p.clone().svd(true, true);
                let x = svd.solve(&(-&q), 1e-12 * p.amax().max(1.0)).expect("SVD with U and Vᵀ");
                x.iter().copied().collect()
            }
            Some((a, lo, hi)) => {
                let prob = QpProblem::new(p, q, a.clone(), lo.clone(), hi.clone());
                qp_active_set_oracle(&prob)
            }
        };
        let value = if members.is_empty() { 0.0 } else { self.value(data, members, &theta) };
        (theta, value)
    }
}

/// Central-difference gradient of `fun` at `point`.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(fun: F, point: &[f64], step: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|j| {
            x[j] = point[j] + step;
            let plus = fun(&x);
            x[j] = point[j] - step;
            let minus = fun(&x);
            x[j] = point[j];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum RowState {
    Inactive,
    AtLower,
    AtUpper,
}

/// Exact QP optimum by trying every active set and keeping the KKT point with
/// the lowest objective.
pub fn qp_active_set_oracle(prob: &QpProblem) -> Vec<f64> {
    let n = prob.n();
    let rows = prob.rows();
    let options: Vec<Vec<RowState>> = (0..rows)
        .map(|r| {
            let (lo, hi) = (prob.lo[r], prob.hi[r]);
            if lo == hi {
                vec![RowState::AtLower]
            } else {
                let mut o = vec![RowState::Inactive];
                if !is_infinite_bound(lo) {
                    o.push(RowState::AtLower);
                }
                if !is_infinite_bound(hi) {
                    o.push(RowState::AtUpper);
                }
                o
            }
        })
        .collect();

    let scale = 1.0 + prob.p.amax() + prob.q.amax();
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut fallback: Option<(f64, DVector<f64>)> = None;
    for states in active_sets(&options) {
        let active: Vec<(usize, RowState)> =
            states.iter().copied().enumerate().filter(|(_, s)| *s != RowState::Inactive).collect();
        let s = active.len();
        let dim = n + s;
        let mut kkt = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
        for j in 0..n {
            rhs[j] = -prob.q[j];
        }
        for (idx, &(r, state)) in active.iter().enumerate() {
            for j in 0..n {
                kkt[(n + idx, j)] = prob.a[(r, j)];
                kkt[(j, n + idx)] = prob.a[(r, j)];
            }
            rhs[n + idx] = if state == RowState::AtUpper { prob.hi[r] } else { prob.lo[r] };
        }
        let svd = kkt.clone().svd(true, true);
        let Ok(sol) = svd.solve(&rhs, 1e-13 * kkt.amax().max(1.0)) else { continue };
        if (&kkt * &sol - &rhs).amax() > 1e-8 * scale {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        let ax = &prob.a * &x;
        let feasible = (0..rows).all(|r| {
            let tol = 1e-9 * (1.0 + prob.lo[r].abs().min(prob.hi[r].abs()).min(1e6));
            ax[r] >= prob.lo[r] - tol && ax[r] <= prob.hi[r] + tol
        });
        if !feasible {
            continue;
        }
        let obj = prob.objective(&x);
        // multipliers: +λ on upper, −λ on lower with λ ≥ 0
        let dual_ok = active.iter().enumerate().all(|(idx, &(r, state))| {
            let y = sol[n + idx];
            match state {
                _ if prob.lo[r] == prob.hi[r] => true,
                RowState::AtUpper => y >= -1e-9 * scale,
                _ => y <= 1e-9 * scale,
            }
        });
        let slot = if dual_ok { &mut best } else { &mut fallback };
        if slot.as_ref().is_none_or(|(v, _)| obj < *v) {
            *slot = Some((obj, x));
        }
    }
    best.or(fallback)
        .map(|(_, x)| x.iter().copied().collect())
        .unwrap_or_else(|| vec![f64::NAN; n])
}

/// Every combination of per-row states, as a mixed-radix count.
fn active_sets(options: &[Vec<RowState>]) -> impl Iterator<Item = Vec<RowState>> + '_ {
    let total: usize = options.iter().map(|o| o.len()).product();
    (0..total).map(move |mut code| {
        options
            .iter()
            .map(|o| {
                let s = o[code % o.len()];
                code /= o.len();
                s
            })
            .collect()
    })
}
