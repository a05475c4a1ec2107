//! Block coordinate descent driver with deterministic multi-restart.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DlfmError, Result};
use crate::fsolve::{harden, solve_f_kl_with, solve_f_plain, FactorMatrix, Labels};
use crate::model::{loss_matrix, objective_from_losses, validate, Dataset, ModelSpec};
use crate::psolve::PSolver;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    GapConverged,
    ObjectiveStalled,
    MaxIter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub after_p: f64,
    pub after_f: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub p_step: f64,
    pub f_step: f64,
    /// Wall seconds of each BCD iteration, in order.
    pub iterations: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub thetas: Vec<Vec<f64>>,
    pub z: FactorMatrix,
    pub labels: Labels,
    pub objective_trace: Vec<TracePoint>,
    pub status: FitStatus,
    pub iterations: usize,
    pub restart_index_of_best: usize,
    pub seed_used: u64,
    pub objective: f64,
    pub timings: PhaseTimes,
}

impl FitResult {
    /// Every recorded total objective, in the order it was reached.
    pub fn objective_sequence(&self) -> Vec<f64> {
        self.objective_trace.iter().flat_map(|t| [t.after_p, t.after_f]).collect()
    }
}

pub fn splitmix64(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rows drawn from a flat Dirichlet.
pub fn init_factors<R: Rng + ?Sized>(m: usize, k: usize, rng: &mut R) -> FactorMatrix {
    let mut data = Vec::with_capacity(m * k);
    for _ in 0..m {
        let row: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1).max(f64::MIN_POSITIVE)).collect();
        let sum: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / sum));
    }
    FactorMatrix::from_row_major_unchecked(m, k, data)
}

pub fn gap(after_p: f64, after_f: f64) -> f64 {
    (after_p - after_f).abs()
}

/// Run every restart; entry `i` is restart `i`.
pub fn fit_runs(spec: &ModelSpec, data: &Dataset) -> Result<Vec<Result<FitResult>>> {
    validate(spec, data).into_result()?;
    let seed = spec.controls.seed;
    let restarts = spec.controls.restarts.max(1);
    Ok((0..restarts)
        .into_par_iter()
        .map(|i| run(spec, data, i, splitmix64(seed, i as u64)))
        .collect())
}

/// Best of `controls.restarts` BCD runs; ties go to the lowest restart index.
pub fn fit(spec: &ModelSpec, data: &Dataset) -> Result<FitResult> {
    let runs = fit_runs(spec, data)?;
    let mut best: Option<FitResult> = None;
    let mut first_error = None;
    for outcome in runs {
        match outcome {
            Ok(res) => {
                let better = match &best {
                    None => true,
                    Some(b) => res.objective < b.objective || (b.objective.is_nan() && !res.objective.is_nan()),
                };
                if better {
                    best = Some(res);
                }
            }
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    match (best, first_error) {
        (Some(b), _) => Ok(b),
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least one restart runs"),
    }
}

/// A single BCD run from a given seed.
pub fn run(spec: &ModelSpec, data: &Dataset, restart: usize, seed: u64) -> Result<FitResult> {
    let controls = &spec.controls;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = init_factors(data.m(), spec.k, &mut rng);
    let mut psolver = PSolver::new(spec);
    let kl = spec.kl_weight();
    let regularized = spec.has_regularizers();

    let wrap = |iteration: usize, e: DlfmError| DlfmError::RunFailure { restart, iteration, source: Box::new(e) };

    let mut thetas: Option<Vec<Vec<f64>>> = None;
    let mut trace: Vec<TracePoint> = Vec::new();
    let mut timings = PhaseTimes::default();
    let mut status = FitStatus::MaxIter;
    let mut failed_last = false;
    let mut previous: Option<f64> = None;

    for iteration in 1..=controls.max_iter.max(1) {
        let started = Instant::now();
        match psolver.solve(spec, data, &z, thetas.as_deref()) {
            Ok(out) => {
                let candidate = out.thetas;
                let accept = match (&thetas, previous) {
                    (Some(_), Some(prev)) => {
                        let r = loss_matrix(spec, data, &candidate);
                        objective_from_losses(spec, &candidate, &z, &r) <= prev
                    }
                    _ => true,
                };
                if accept {
                    thetas = Some(candidate);
                }
                failed_last = false;
            }
            Err(e) => {
                if thetas.is_none() || failed_last {
                    return Err(wrap(iteration, e));
                }
                failed_last = true;
            }
        }
        let th = thetas.as_ref().expect("parameters set after first P-step");
        let r = loss_matrix(spec, data, th);
        let after_p = objective_from_losses(spec, th, &z, &r);
        let p_done = Instant::now();
        timings.p_step += (p_done - started).as_secs_f64();

        let candidate = if kl > 0.0 {
            solve_f_kl_with(&r, kl, &z, controls.f_tol, controls.f_max_iter).map_err(|e| wrap(iteration, e))?.z
        } else {
            solve_f_plain(&r)
        };
        let candidate_value = objective_from_losses(spec, th, &candidate, &r);
        let after_f = if candidate_value <= after_p {
            z = candidate;
            candidate_value
        } else {
            after_p
        };
        timings.f_step += p_done.elapsed().as_secs_f64();
        timings.iterations.push(started.elapsed().as_secs_f64());
        trace.push(TracePoint { iteration, after_p, after_f });

        if !failed_last {
            if !regularized {
                if gap(after_p, after_f) <= controls.eps {
                    status = FitStatus::GapConverged;
                    break;
                }
            } else if let Some(prev) = previous {
                if (prev - after_f).abs() <= controls.eps * prev.abs().max(1.0) {
                    status = FitStatus::ObjectiveStalled;
                    break;
                }
            }
        }
        previous = Some(after_f);
    }

    let thetas = thetas.expect("at least one iteration");
    let objective = trace.last().map(|t| t.after_f).unwrap_or(f64::NAN);
    Ok(FitResult {
        labels: harden(&z),
        thetas,
        z,
        iterations: trace.len(),
        objective_trace: trace,
        status,
        restart_index_of_best: restart,
        seed_used: seed,
        objective,
        timings,
    })
}
