//! The parameter problem: with factor weights `z̃` fixed, minimize
//! `Σ_i z̃_ik f_k(x_i, y_i; θ_k) + reg(θ_k)` over `θ_k ∈ C_k` for every
//! factor independently.
//!
//! Quadratic losses without regularizers go through a direct solve (or the
//! ADMM QP when constrained); everything else uses accelerated proximal
//! gradient with backtracking and a monotone restart, except the nonsmooth
//! `ℓp` losses which fall back to projected subgradient steps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DlfmError, Result};
use crate::fsolve::FactorMatrix;
use crate::kernels::project::Projector;
use crate::kernels::prox::prox_sum;
use crate::kernels::qp::{QpProblem, QpSettings, QpSolution, QpStatus, QpWorkspace};
use crate::model::{ConstraintAtom, Dataset, LinearRow, LossAtom, LossKind, ModelSpec, RegularizerAtom};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorStatus {
    Converged,
    MaxIter,
    /// No data weight and no regularizer: the warm start was kept.
    Untouched,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PSolveOutcome {
    pub thetas: Vec<Vec<f64>>,
    /// `Σ_i z̃_i·r_i + Σ reg(θ_k)` at the returned parameters.
    pub objective: f64,
    pub inner_iterations: Vec<usize>,
    pub status: Vec<FactorStatus>,
}

#[derive(Debug)]
enum Route {
    /// Weighted least squares or location fit, possibly under linear rows.
    Quadratic { rows: Option<(DMatrix<f64>, DVector<f64>, DVector<f64>)> },
    ProxGradient,
    Subgradient,
}

#[derive(Debug)]
struct FactorState {
    route: Route,
    projector: Projector,
    qp: QpWorkspace,
    qp_warm: Option<QpSolution>,
}

/// Parameter-problem solver holding per-factor workspaces between calls.
#[derive(Debug)]
pub struct PSolver {
    factors: Vec<FactorState>,
    regs: Vec<RegularizerAtom>,
    qp_settings: QpSettings,
    inner_tol: f64,
    inner_max_iter: usize,
}

fn linear_description(atoms: &[ConstraintAtom], n: usize) -> Option<Vec<LinearRow>> {
    let mut rows = Vec::new();
    for atom in atoms {
        rows.extend(atom.linear_rows(n)?);
    }
    Some(rows)
}

impl PSolver {
    pub fn new(spec: &ModelSpec) -> Self {
        let regs: Vec<RegularizerAtom> =
            spec.p_regularizers.iter().copied().filter(|r| r.is_parameter_side() && r.weight() > 0.0).collect();
        let factors = spec
            .losses
            .iter()
            .zip(&spec.constraints)
            .map(|(loss, atoms)| {
                let route = if loss.kind.is_quadratic() && regs.is_empty() {
                    match linear_description(atoms, spec.n) {
                        Some(rows) if rows.is_empty() => Some(Route::Quadratic { rows: None }),
                        Some(rows) => {
                            let a = DMatrix::from_fn(rows.len(), spec.n, |i, j| rows[i].coef[j]);
                            let lo = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.lo));
                            let hi = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.hi));
                            Some(Route::Quadratic { rows: Some((a, lo, hi)) })
                        }
                        None => None,
                    }
                } else {
                    None
                };
                let route = route.unwrap_or(if loss.kind.is_smooth() { Route::ProxGradient } else { Route::Subgradient });
                FactorState {
                    route,
                    projector: Projector::with_tolerance(atoms, spec.n, spec.controls.qp_tol.min(1e-9)),
                    qp: QpWorkspace::new(),
                    qp_warm: None,
                }
            })
            .collect();
        PSolver {
            factors,
            regs,
            qp_settings: QpSettings {
                tol: spec.controls.qp_tol,
                max_iter: spec.controls.qp_max_iter,
                ..QpSettings::default()
            },
            inner_tol: spec.controls.inner_tol,
            inner_max_iter: spec.controls.inner_max_iter,
        }
    }

    /// Total factorizations performed by the per-factor QP workspaces.
    pub fn factorizations(&self) -> usize {
        self.factors.iter().map(|f| f.qp.factorizations()).sum()
    }

    pub fn solve(
        &mut self,
        spec: &ModelSpec,
        data: &Dataset,
        z: &FactorMatrix,
        warm: Option<&[Vec<f64>]>,
    ) -> Result<PSolveOutcome> {
        if z.rows() != data.m() || z.cols() != spec.k {
            return Err(DlfmError::Shape(format!(
                "factor matrix is {}x{}, expected {}x{}",
                z.rows(),
                z.cols(),
                data.m(),
                spec.k
            )));
        }
        let mut thetas = Vec::with_capacity(spec.k);
        let mut inner_iterations = Vec::with_capacity(spec.k);
        let mut status = Vec::with_capacity(spec.k);
        let mut objective = 0.0;
        let regs = self.regs.clone();
        for k in 0..spec.k {
            let active: Vec<(usize, f64)> =
                z.column(k).enumerate().filter(|(_, w)| *w > 0.0).collect();
            let problem = FactorProblem {
                loss: &spec.losses[k],
                data,
                active: &active,
                regs: &regs,
            };
            let warm_k = warm.map(|w| w[k].as_slice());
            let (theta, iters, st) = self.solve_factor(k, &problem, warm_k)?;
            objective += problem.value(&theta);
            thetas.push(theta);
            inner_iterations.push(iters);
            status.push(st);
        }
        Ok(PSolveOutcome { thetas, objective, inner_iterations, status })
    }

    fn solve_factor(
        &mut self,
        k: usize,
        problem: &FactorProblem<'_>,
        warm: Option<&[f64]>,
    ) -> Result<(Vec<f64>, usize, FactorStatus)> {
        let n = problem.data.n();
        let tag = |e: DlfmError| match e {
            DlfmError::SubsolverFailure { reason, .. } => DlfmError::SubsolverFailure { factor: k, reason },
            other => other,
        };
        let state = &mut self.factors[k];
        if problem.active.is_empty() && self.regs.is_empty() {
            let theta = match warm {
                Some(w) => w.to_vec(),
                None => state.projector.project(&vec![0.0; n]).map_err(tag)?,
            };
            return Ok((theta, 0, FactorStatus::Untouched));
        }
        // start from a feasible point
        let start = match warm {
            Some(w) => {
                let p = state.projector.project(w).map_err(tag)?;
                if p.iter().zip(w).all(|(a, b)| (a - b).abs() <= 1e-12) { w.to_vec() } else { p }
            }
            None => state.projector.project(&vec![0.0; n]).map_err(tag)?,
        };
        let start_value = problem.value(&start);

        let (theta, iters, st) = match &state.route {
            Route::Quadratic { rows } => {
                let (h, g) = problem.normalized_quadratic();
                match rows {
                    None => (solve_unconstrained(&h, &g), 1, FactorStatus::Converged),
                    Some((a, lo, hi)) => {
                        let prob = QpProblem { p: h, q: g, a: a.clone(), lo: lo.clone(), hi: hi.clone() };
                        let sol = state.qp.solve(&prob, state.qp_warm.as_ref(), &self.qp_settings);
                        match sol.status {
                            QpStatus::PrimalInfeasible => {
                                return Err(DlfmError::SubsolverFailure {
                                    factor: k,
                                    reason: "parameter QP is infeasible".into(),
                                })
                            }
                            QpStatus::MaxIter if sol.primal_residual.max(sol.dual_residual) > 1e-6 => {
                                return Err(DlfmError::SubsolverFailure {
                                    factor: k,
                                    reason: format!(
                                        "parameter QP hit the iteration cap at residuals {:.2e}/{:.2e}",
                                        sol.primal_residual, sol.dual_residual
                                    ),
                                })
                            }
                            _ => {}
                        }
                        let st = if sol.status == QpStatus::Solved { FactorStatus::Converged } else { FactorStatus::MaxIter };
                        let x: Vec<f64> = sol.x.iter().copied().collect();
                        let iters = sol.iterations;
                        state.qp_warm = Some(sol);
                        (x, iters, st)
                    }
                }
            }
            Route::ProxGradient => {
                accelerated_prox_gradient(problem, &mut state.projector, start.clone(), self.inner_tol, self.inner_max_iter)
                    .map_err(tag)?
            }
            Route::Subgradient => {
                projected_subgradient(problem, &mut state.projector, start.clone(), self.inner_max_iter).map_err(tag)?
            }
        };
        if problem.value(&theta) > start_value {
            return Ok((start, iters, st));
        }
        Ok((theta, iters, st))
    }
}

/// Solve the parameter problem with fresh workspaces.
pub fn solve_p(
    spec: &ModelSpec,
    data: &Dataset,
    z: &FactorMatrix,
    warm: Option<&[Vec<f64>]>,
) -> Result<PSolveOutcome> {
    PSolver::new(spec).solve(spec, data, z, warm)
}

struct FactorProblem<'a> {
    loss: &'a LossAtom,
    data: &'a Dataset,
    active: &'a [(usize, f64)],
    regs: &'a [RegularizerAtom],
}

impl FactorProblem<'_> {
    fn smooth_value(&self, theta: &[f64]) -> f64 {
        let rows = self.data.rows();
        self.active
            .iter()
            .map(|&(i, w)| w * self.loss.value(self.data.feature(i), rows, self.data.observation(i), theta))
            .sum()
    }

    fn smooth_value_and_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let rows = self.data.rows();
        self.active
            .iter()
            .map(|&(i, w)| {
                w * self.loss.accumulate(self.data.feature(i), rows, self.data.observation(i), theta, w, Some(grad))
            })
            .sum()
    }

    fn reg_value(&self, theta: &[f64]) -> f64 {
        self.regs.iter().map(|r| r.block_value(theta)).sum()
    }

    fn value(&self, theta: &[f64]) -> f64 {
        self.smooth_value(theta) + self.reg_value(theta)
    }

    /// `Σ w XᵀX`.
    fn gram(&self) -> DMatrix<f64> {
        let n = self.data.n();
        let rows = self.data.rows();
        let mut m = DMatrix::zeros(n, n);
        if matches!(self.loss.kind, LossKind::SquaredDistance) {
            let total: f64 = self.active.iter().map(|(_, w)| w).sum();
            return DMatrix::identity(n, n) * total;
        }
        for &(i, w) in self.active {
            let x = self.data.feature(i);
            for r in 0..rows {
                let xr = &x[r * n..(r + 1) * n];
                for a in 0..n {
                    if xr[a] == 0.0 {
                        continue;
                    }
                    for b in 0..n {
                        m[(a, b)] += w * xr[a] * xr[b];
                    }
                }
            }
        }
        m
    }

    /// Hessian and linear term of the quadratic losses, divided by total weight.
    fn normalized_quadratic(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.data.n();
        let rows = self.data.rows();
        let total: f64 = self.active.iter().map(|(_, w)| w).sum();
        let mut g = DVector::zeros(n);
        let h = self.gram() * (2.0 / total);
        for &(i, w) in self.active {
            let x = self.data.feature(i);
            let y = self.data.observation(i);
            match self.loss.kind {
                LossKind::SquaredDistance => {
                    for j in 0..n {
                        g[j] -= 2.0 * w * (x[j] + y[0]) / total;
                    }
                }
                _ => {
                    for r in 0..rows {
                        for j in 0..n {
                            g[j] -= 2.0 * w * y[r] * x[r * n + j] / total;
                        }
                    }
                }
            }
        }
        (h, g)
    }
}

fn solve_unconstrained(h: &DMatrix<f64>, g: &DVector<f64>) -> Vec<f64> {
    let rhs = -g;
    if let Some(chol) = h.clone().cholesky() {
        let x = chol.solve(&rhs);
        if x.iter().all(|v| v.is_finite()) {
            return x.iter().copied().collect();
        }
    }
    // singular system: minimum-norm least squares
    let svd = h.clone().svd(true, true);
    let x = svd.solve(&rhs, 1e-12 * h.amax().max(1.0)).expect("SVD with U and Vᵀ");
    x.iter().copied().collect()
}

fn largest_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= 1e-10 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // power iteration approaches from below; pad it
    lambda.max(0.0) * 1.01 + 1e-12
}

/// Prox of `step·reg + indicator(C)`.
fn prox_nonsmooth(problem: &FactorProblem<'_>, projector: &mut Projector, v: &[f64], step: f64) -> Result<Vec<f64>> {
    if problem.regs.is_empty() {
        return projector.project(v);
    }
    if projector.is_free() {
        return Ok(prox_sum(problem.regs, v, step));
    }
    // Dykstra-like splitting for the prox of a sum
    let n = v.len();
    let mut x = v.to_vec();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for _ in 0..500 {
        let shifted: Vec<f64> = (0..n).map(|j| x[j] + p[j]).collect();
        let y = prox_sum(problem.regs, &shifted, step);
        for j in 0..n {
            p[j] = shifted[j] - y[j];
        }
        let shifted: Vec<f64> = (0..n).map(|j| y[j] + q[j]).collect();
        let next = projector.project(&shifted)?;
        for j in 0..n {
            q[j] = shifted[j] - next[j];
        }
        let change = (0..n).map(|j| (next[j] - x[j]).abs()).fold(0.0, f64::max);
        x = next;
        if change <= 1e-14 * (1.0 + x.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
            break;
        }
    }
    Ok(x)
}

fn accelerated_prox_gradient(
    problem: &FactorProblem<'_>,
    projector: &mut Projector,
    start: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize, FactorStatus)> {
    let n = start.len();
    let lipschitz = problem.loss.curvature_scale().unwrap_or(1.0) * largest_eigenvalue(&problem.gram());
    let mut step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };

    let mut x = start;
    let mut value = problem.value(&x);
    let mut y = x.clone();
    let mut momentum: f64 = 1.0;
    let mut grad = vec![0.0; n];
    let mut small_steps = 0;
    let mut iterations = 0;
    let mut restarted = false;

    while iterations < max_iter {
        iterations += 1;
        let f_y = problem.smooth_value_and_grad(&y, &mut grad);
        let (x_next, f_next) = loop {
            let trial: Vec<f64> = (0..n).map(|j| y[j] - step * grad[j]).collect();
            let cand = prox_nonsmooth(problem, projector, &trial, step)?;
            let f_c = problem.smooth_value(&cand);
            let mut lin = 0.0;
            let mut sq = 0.0;
            for j in 0..n {
                let d = cand[j] - y[j];
                lin += grad[j] * d;
                sq += d * d;
            }
            if f_c <= f_y + lin + sq / (2.0 * step) + 1e-12 * f_y.abs().max(1.0) || step < 1e-300 {
                break (cand, f_c);
            }
            step *= 0.5;
        };
        let next_value = f_next + problem.reg_value(&x_next);
        if next_value > value {
            if restarted {
                // a plain step from x failed to descend: at a numerical minimum
                break;
            }
            y.clone_from(&x);
            momentum = 1.0;
            restarted = true;
            continue;
        }
        restarted = false;
        let decrease = value - next_value;
        let next_momentum = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let beta = (momentum - 1.0) / next_momentum;
        for j in 0..n {
            y[j] = x_next[j] + beta * (x_next[j] - x[j]);
        }
        x = x_next;
        value = next_value;
        momentum = next_momentum;
        if decrease <= tol * value.abs().max(1.0) {
            small_steps += 1;
            if small_steps >= 3 {
                return Ok((x, iterations, FactorStatus::Converged));
            }
        } else {
            small_steps = 0;
        }
    }
    let status = if iterations < max_iter { FactorStatus::Converged } else { FactorStatus::MaxIter };
    Ok((x, iterations, status))
}

fn projected_subgradient(
    problem: &FactorProblem<'_>,
    projector: &mut Projector,
    start: Vec<f64>,
    max_iter: usize,
) -> Result<(Vec<f64>, usize, FactorStatus)> {
    let n = start.len();
    let mut x = start;
    let mut best = x.clone();
    let mut best_value = problem.value(&x);
    let scale = 0.1 * x.iter().map(|v| v.abs()).fold(1.0, f64::max);
    let mut grad = vec![0.0; n];
    for it in 1..=max_iter {
        problem.smooth_value_and_grad(&x, &mut grad);
        for reg in problem.regs {
            match *reg {
                RegularizerAtom::L1 { weight } => {
                    for j in 0..n {
                        grad[j] += weight * if x[j] == 0.0 { 0.0 } else { x[j].signum() };
                    }
                }
                RegularizerAtom::GroupL2 { weight } => {
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        for j in 0..n {
                            grad[j] += weight * x[j] / norm;
                        }
                    }
                }
                RegularizerAtom::KlChain { .. } => {}
            }
        }
        let gnorm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gnorm == 0.0 {
            return Ok((best, it, FactorStatus::Converged));
        }
        let step = scale / (it as f64).sqrt() / gnorm;
        let trial: Vec<f64> = (0..n).map(|j| x[j] - step * grad[j]).collect();
        x = projector.project(&trial)?;
        let v = problem.value(&x);
        if v < best_value {
            best_value = v;
            best.clone_from(&x);
        }
    }
    Ok((best, max_iter, FactorStatus::MaxIter))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::INF;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_factor_centroid() {
        let data = Dataset::from_vectors(&[vec![0.0], vec![1.0], vec![2.0]], &[0.0, 0.0, 0.0]).unwrap();
        let spec = ModelSpec::new(1, 1, LossAtom::squared_distance());
        let out = solve_p(&spec, &data, &FactorMatrix::uniform(3, 1), None).unwrap();
        assert_abs_diff_eq!(out.thetas[0][0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.objective, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_weight_factor_keeps_warm_start() {
        let data = Dataset::from_vectors(&[vec![0.0], vec![1.0]], &[0.0, 0.0]).unwrap();
        let spec = ModelSpec::new(2, 1, LossAtom::squared_distance());
        let z = FactorMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let warm = vec![vec![5.0], vec![-7.0]];
        let out = solve_p(&spec, &data, &z, Some(&warm)).unwrap();
        assert_eq!(out.thetas[1], vec![-7.0]);
        assert_eq!(out.status[1], FactorStatus::Untouched);
    }

    #[test]
    fn zero_weight_factor_with_l1_goes_to_zero() {
        let data = Dataset::from_vectors(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 2.0]).unwrap();
        let spec = ModelSpec::new(2, 2, LossAtom::square()).with_p_regularizer(RegularizerAtom::L1 { weight: 0.1 });
        let z = FactorMatrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let warm = vec![vec![1.0, 1.0], vec![3.0, -2.0]];
        let out = solve_p(&spec, &data, &z, Some(&warm)).unwrap();
        assert!(out.thetas[1].iter().all(|v| v.abs() < 1e-9), "{:?}", out.thetas[1]);
        // lasso solution per coordinate: θ = y − λ/2
        assert_abs_diff_eq!(out.thetas[0][0], 0.95, epsilon = 1e-6);
        assert_abs_diff_eq!(out.thetas[0][1], 1.95, epsilon = 1e-6);
    }

    #[test]
    fn constrained_location_lands_on_boundary() {
        let data = Dataset::from_vectors(&[vec![3.0, 3.0], vec![4.0, 3.0]], &[0.0, 0.0]).unwrap();
        let spec = ModelSpec::new(1, 2, LossAtom::squared_distance()).with_shared_constraints(vec![
            ConstraintAtom::Polyhedron { a: vec![vec![1.0, 1.0]], b: vec![2.0] },
        ]);
        let out = solve_p(&spec, &data, &FactorMatrix::uniform(2, 1), None).unwrap();
        let t = &out.thetas[0];
        assert_abs_diff_eq!(t[0] + t[1], 2.0, epsilon = 1e-8);
        assert_abs_diff_eq!(t[0], 1.25, epsilon = 1e-8);
    }

    #[test]
    fn box_constrained_logistic_respects_bounds() {
        let xs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 5.0 - 2.0, 1.0]).collect();
        let ys: Vec<f64> = (0..20).map(|i| if i >= 10 { 1.0 } else { 0.0 }).collect();
        let data = Dataset::from_vectors(&xs, &ys).unwrap();
        let spec = ModelSpec::new(1, 2, LossAtom::binary_logit())
            .with_shared_constraints(vec![ConstraintAtom::Box { lo: vec![-INF, -INF], hi: vec![0.0, INF] }])
            .with_p_regularizer(RegularizerAtom::GroupL2 { weight: 0.5 });
        let out = solve_p(&spec, &data, &FactorMatrix::uniform(20, 1), None).unwrap();
        assert!(out.thetas[0][0] <= 1e-9);
    }
}
