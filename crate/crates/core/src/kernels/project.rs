//! Euclidean projection onto intersections of constraint atoms.

use nalgebra::{DMatrix, DVector};

use super::qp::{QpProblem, QpSettings, QpSolution, QpStatus, QpWorkspace};
use crate::error::{DlfmError, Result};
use crate::model::{is_infinite_bound, ConstraintAtom, LinearRow, INF};

/// Closed-form projection onto `{x : Σx = value, x ≥ 0}`.
pub fn project_simplex(v: &[f64], value: f64) -> Vec<f64> {
    if value <= 0.0 {
        return vec![0.0; v.len()];
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut shift = 0.0;
    for (j, s) in sorted.iter().enumerate() {
        cumulative += s;
        let t = (cumulative - value) / (j + 1) as f64;
        if s - t > 0.0 {
            shift = t;
        }
    }
    v.iter().map(|x| (x - shift).max(0.0)).collect()
}

/// Pool-adjacent-violators fit of a nondecreasing sequence.
pub fn isotonic_nondecreasing(v: &[f64]) -> Vec<f64> {
    // blocks of (mean, count)
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(v.len());
    for &x in v {
        blocks.push((x, 1));
        while blocks.len() > 1 {
            let (m2, c2) = blocks[blocks.len() - 1];
            let (m1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let c = c1 + c2;
            *blocks.last_mut().unwrap() = ((m1 * c1 as f64 + m2 * c2 as f64) / c as f64, c);
        }
    }
    blocks.into_iter().flat_map(|(m, c)| std::iter::repeat_n(m, c)).collect()
}

pub fn isotonic_nonincreasing(v: &[f64]) -> Vec<f64> {
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    isotonic_nondecreasing(&neg).into_iter().map(|x| -x).collect()
}

fn project_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= radius {
        v.to_vec()
    } else {
        v.iter().map(|x| x * radius / norm).collect()
    }
}

#[derive(Debug, Clone)]
enum Plan {
    /// Intersection of coordinate bounds.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Simplex { value: f64 },
    Affine { value: f64 },
    Nonincreasing,
    Nondecreasing,
    /// Monotone sequence within constant bounds: clipping the isotonic fit is exact.
    MonotoneClipped { nondecreasing: bool, lo: f64, hi: f64 },
    Ball { radius: f64 },
    /// General polyhedral intersection, solved as a QP.
    Polyhedral { a: DMatrix<f64>, lo: DVector<f64>, hi: DVector<f64> },
    /// Intersection of a ball with a polyhedral part, by Dykstra's method.
    BallAnd { radius: f64, rest: Box<Plan> },
}

/// Reusable projector onto one factor's feasible set.
///
/// Classifies the atoms once, then keeps the QP workspace and the previous
/// solution so repeated projections warm start.
#[derive(Debug)]
pub struct Projector {
    n: usize,
    plan: Plan,
    workspace: QpWorkspace,
    warm: Option<QpSolution>,
    tol: f64,
}

impl Projector {
    pub fn new(atoms: &[ConstraintAtom], n: usize) -> Self {
        Projector::with_tolerance(atoms, n, 1e-10)
    }

    pub fn with_tolerance(atoms: &[ConstraintAtom], n: usize, tol: f64) -> Self {
        Projector { n, plan: plan(atoms, n), workspace: QpWorkspace::new(), warm: None, tol }
    }

    /// True when the set is all of ℝⁿ.
    pub fn is_free(&self) -> bool {
        matches!(&self.plan, Plan::Box { lo, hi } if lo.iter().chain(hi).all(|v| is_infinite_bound(*v)))
    }

    pub fn project(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        debug_assert_eq!(v.len(), self.n);
        let plan = self.plan.clone();
        self.apply(&plan, v)
    }

    fn apply(&mut self, plan: &Plan, v: &[f64]) -> Result<Vec<f64>> {
        Ok(match plan {
            Plan::Box { lo, hi } => v.iter().enumerate().map(|(j, x)| x.clamp(lo[j], hi[j])).collect(),
            Plan::Simplex { value } => project_simplex(v, *value),
            Plan::Affine { value } => {
                let shift = (value - v.iter().sum::<f64>()) / v.len() as f64;
                v.iter().map(|x| x + shift).collect()
            }
            Plan::Nonincreasing => isotonic_nonincreasing(v),
            Plan::Nondecreasing => isotonic_nondecreasing(v),
            Plan::MonotoneClipped { nondecreasing, lo, hi } => {
                let fit = if *nondecreasing { isotonic_nondecreasing(v) } else { isotonic_nonincreasing(v) };
                fit.into_iter().map(|x| x.clamp(*lo, *hi)).collect()
            }
            Plan::Ball { radius } => project_ball(v, *radius),
            Plan::Polyhedral { a, lo, hi } => {
                let n = v.len();
                let prob = QpProblem {
                    p: DMatrix::identity(n, n),
                    q: -DVector::from_column_slice(v),
                    a: a.clone(),
                    lo: lo.clone(),
                    hi: hi.clone(),
                };
                let settings = QpSettings { tol: self.tol, ..QpSettings::default() };
                let sol = self.workspace.solve(&prob, self.warm.as_ref(), &settings);
                match sol.status {
                    QpStatus::PrimalInfeasible => {
                        return Err(DlfmError::SubsolverFailure {
                            factor: usize::MAX,
                            reason: "projection onto an empty set".into(),
                        })
                    }
                    QpStatus::MaxIter if sol.primal_residual.max(sol.dual_residual) > 1e-6 => {
                        return Err(DlfmError::SubsolverFailure {
                            factor: usize::MAX,
                            reason: format!(
                                "projection QP stopped at residuals {:.2e}/{:.2e}",
                                sol.primal_residual, sol.dual_residual
                            ),
                        })
                    }
                    _ => {}
                }
                let x = sol.x.iter().cloned().collect();
                self.warm = Some(sol);
                x
            }
            Plan::BallAnd { radius, rest } => {
                // Dykstra's alternating projections
                let n = v.len();
                let mut x = v.to_vec();
                let mut p = vec![0.0; n];
                let mut q = vec![0.0; n];
                for _ in 0..10_000 {
                    let shifted: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + b).collect();
                    let y = self.apply(rest, &shifted)?;
                    for j in 0..n {
                        p[j] = shifted[j] - y[j];
                    }
                    let shifted: Vec<f64> = y.iter().zip(&q).map(|(a, b)| a + b).collect();
                    let next = project_ball(&shifted, *radius);
                    for j in 0..n {
                        q[j] = shifted[j] - next[j];
                    }
                    let change = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    let gap = y.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    x = next;
                    if change <= 1e-13 && gap <= 1e-11 {
                        break;
                    }
                }
                x
            }
        })
    }
}

fn plan(atoms: &[ConstraintAtom], n: usize) -> Plan {
    let mut lo = vec![-INF; n];
    let mut hi = vec![INF; n];
    let mut structured = Vec::new();
    let mut ball = None;
    for atom in atoms {
        match atom {
            ConstraintAtom::Free => {}
            ConstraintAtom::Nonneg => lo.iter_mut().for_each(|l| *l = l.max(0.0)),
            ConstraintAtom::Nonpos => hi.iter_mut().for_each(|h| *h = h.min(0.0)),
            ConstraintAtom::Box { lo: bl, hi: bh } => {
                for j in 0..n {
                    lo[j] = lo[j].max(bl[j]);
                    hi[j] = hi[j].min(bh[j]);
                }
            }
            ConstraintAtom::NormBall2 { radius } => {
                ball = Some(ball.map_or(*radius, |r: f64| r.min(*radius)));
            }
            other => structured.push(other.clone()),
        }
    }
    let box_free = lo.iter().chain(&hi).all(|v| is_infinite_bound(*v));
    let nonneg_only = lo.iter().all(|l| *l == 0.0) && hi.iter().all(|h| is_infinite_bound(*h));
    let constant_bounds = n > 0 && lo.iter().all(|l| *l == lo[0]) && hi.iter().all(|h| *h == hi[0]);

    let polyhedral = match structured.as_slice() {
        [] => Plan::Box { lo: lo.clone(), hi: hi.clone() },
        [ConstraintAtom::SumEquals { value }] if nonneg_only => Plan::Simplex { value: *value },
        [ConstraintAtom::SumEquals { value }] if box_free => Plan::Affine { value: *value },
        [ConstraintAtom::MonotoneNonincreasing] if box_free => Plan::Nonincreasing,
        [ConstraintAtom::MonotoneNondecreasing] if box_free => Plan::Nondecreasing,
        [ConstraintAtom::MonotoneNonincreasing] if constant_bounds => {
            Plan::MonotoneClipped { nondecreasing: false, lo: lo[0], hi: hi[0] }
        }
        [ConstraintAtom::MonotoneNondecreasing] if constant_bounds => {
            Plan::MonotoneClipped { nondecreasing: true, lo: lo[0], hi: hi[0] }
        }
        _ => {
            let mut rows: Vec<LinearRow> = Vec::new();
            let bounds = ConstraintAtom::Box { lo: lo.clone(), hi: hi.clone() };
            rows.extend(bounds.linear_rows(n).unwrap_or_default());
            for atom in &structured {
                rows.extend(atom.linear_rows(n).unwrap_or_default());
            }
            let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].coef[j]);
            let lo = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.lo));
            let hi = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.hi));
            Plan::Polyhedral { a, lo, hi }
        }
    };
    match ball {
        None => polyhedral,
        Some(radius) => match polyhedral {
            Plan::Box { .. } if box_free => Plan::Ball { radius },
            rest => Plan::BallAnd { radius, rest: Box::new(rest) },
        },
    }
}

/// Euclidean projection of `point` onto the intersection of `atoms`.
pub fn project(atoms: &[ConstraintAtom], point: &[f64]) -> Result<Vec<f64>> {
    Projector::new(atoms, point.len()).project(point)
}
