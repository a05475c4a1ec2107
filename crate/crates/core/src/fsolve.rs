//! The factor problem: minimize `Σ_i z_i·r̃_i` (plus an optional KL chain)
//! over a product of probability simplices, and hardening to labels.

use serde::{Deserialize, Serialize};

use crate::error::{DlfmError, Result};
use crate::model::kl_divergence;

/// Smallest entry kept in a factor row by the mirror-descent solver.
pub const POSITIVITY_FLOOR: f64 = 1e-12;

/// Row-major `m × K` matrix of per-sample losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct LossMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl LossMatrix {
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        LossMatrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(DlfmError::Shape("loss rows must be nonempty and of equal length".into()));
        }
        Ok(LossMatrix { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.cols + k]
    }
}

impl From<LossMatrix> for Vec<Vec<f64>> {
    fn from(m: LossMatrix) -> Self {
        m.data.chunks(m.cols.max(1)).map(|c| c.to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for LossMatrix {
    type Error = DlfmError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        LossMatrix::from_rows(&rows)
    }
}

/// Relaxed latent factors: an `m × K` row-stochastic matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct FactorMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FactorMatrix {
    /// Builds from row-major data, checking nonnegativity and unit row sums.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols || cols == 0 {
            return Err(DlfmError::Shape(format!("expected {rows}x{cols} factor entries")));
        }
        let z = FactorMatrix { rows, cols, data };
        for i in 0..rows {
            let row = z.row(i);
            if row.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(DlfmError::Shape(format!("factor row {i} is not a probability vector")));
            }
        }
        Ok(z)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DlfmError::Shape("factor rows differ in length".into()));
        }
        FactorMatrix::from_row_major(rows.len(), cols, rows.concat())
    }

    pub(crate) fn from_row_major_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        FactorMatrix { rows, cols, data }
    }

    /// One-hot rows for 1-based `labels`.
    pub fn one_hot(labels: &Labels, k: usize) -> Self {
        let mut data = vec![0.0; labels.len() * k];
        for (i, l) in labels.iter().enumerate() {
            data[i * k + l - 1] = 1.0;
        }
        FactorMatrix { rows: labels.len(), cols: k, data }
    }

    /// Every row equal to `1/K`.
    pub fn uniform(rows: usize, k: usize) -> Self {
        FactorMatrix { rows, cols: k, data: vec![1.0 / k as f64; rows * k] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.cols + k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(k).step_by(self.cols).copied()
    }

    /// `Σ_i z_i · r_i`.
    pub fn weighted_sum(&self, r: &LossMatrix) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (r.rows(), r.cols()));
        self.data.iter().zip(&r.data).map(|(z, l)| if *z == 0.0 { 0.0 } else { z * l }).sum()
    }
}

impl From<FactorMatrix> for Vec<Vec<f64>> {
    fn from(m: FactorMatrix) -> Self {
        m.data.chunks(m.cols.max(1)).map(|c| c.to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for FactorMatrix {
    type Error = DlfmError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        FactorMatrix::from_rows(&rows)
    }
}

/// Hard factor assignments, 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Labels(pub Vec<usize>);

impl Labels {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

impl std::ops::Deref for Labels {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

fn first_extreme(row: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate().skip(1) {
        if better(*v, row[best]) {
            best = k;
        }
    }
    best
}

/// Optimal vertex of the unregularized factor LP: one-hot at each row's
/// smallest loss, ties to the lowest index.
pub fn solve_f_plain(r: &LossMatrix) -> FactorMatrix {
    let k = r.cols();
    let mut data = vec![0.0; r.rows() * k];
    for i in 0..r.rows() {
        data[i * k + first_extreme(r.row(i), |a, b| a < b)] = 1.0;
    }
    FactorMatrix { rows: r.rows(), cols: k, data }
}

/// Row argmax, ties to the lowest index.
pub fn harden(z: &FactorMatrix) -> Labels {
    Labels((0..z.rows()).map(|i| first_extreme(z.row(i), |a, b| a > b) + 1).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KlOutcome {
    pub z: FactorMatrix,
    pub objective: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit; `z` is then the best iterate.
    pub converged: bool,
    /// Objective after every accepted step, starting with the initial point.
    pub history: Vec<f64>,
}

/// `Σ_t z_t·r_t + λ Σ_t D_kl(z_t, z_{t+1})`.
pub fn kl_objective(r: &LossMatrix, weight: f64, z: &FactorMatrix) -> f64 {
    let linear = z.weighted_sum(r);
    if weight == 0.0 {
        return linear;
    }
    linear + weight * (1..z.rows()).map(|t| kl_divergence(z.row(t - 1), z.row(t))).sum::<f64>()
}

/// Mirror descent on the KL-chain regularized factor problem with default
/// tolerance `1e-9` and cap `50000`.
pub fn solve_f_kl(r: &LossMatrix, weight: f64, init: &FactorMatrix) -> Result<KlOutcome> {
    solve_f_kl_with(r, weight, init, 1e-9, 50_000)
}

pub fn solve_f_kl_with(
    r: &LossMatrix,
    weight: f64,
    init: &FactorMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<KlOutcome> {
    let (m, k) = (r.rows(), r.cols());
    if (init.rows(), init.cols()) != (m, k) {
        return Err(DlfmError::Shape(format!(
            "initial factors are {}x{}, losses are {m}x{k}",
            init.rows(),
            init.cols()
        )));
    }
    let mut z = init.clone();
    for i in 0..m {
        normalize_with_floor(&mut z.data[i * k..(i + 1) * k]);
    }
    let mut value = kl_objective(r, weight, &z);
    let mut history = vec![value];
    let mut grad = vec![0.0; m * k];
    let mut candidate = z.clone();
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        kl_gradient(r, weight, &z, &mut grad);
        let mut accepted = false;
        while step >= 1e-30 {
            for i in 0..m {
                let g = &grad[i * k..(i + 1) * k];
                let shift = g.iter().cloned().fold(f64::INFINITY, f64::min);
                let out = &mut candidate.data[i * k..(i + 1) * k];
                for c in 0..k {
                    out[c] = z.data[i * k + c] * (-step * (g[c] - shift)).exp();
                }
                normalize_with_floor(out);
            }
            let next = kl_objective(r, weight, &candidate);
            let linear: f64 = grad
                .iter()
                .zip(candidate.data.iter().zip(&z.data))
                .map(|(g, (c, p))| g * (c - p))
                .sum();
            let bregman: f64 = candidate
                .data
                .iter()
                .zip(&z.data)
                .map(|(c, p)| if *c == 0.0 { 0.0 } else { c * (c / p).ln() })
                .sum();
            if next <= value && next <= value + linear + bregman / step + 1e-12 * value.abs().max(1.0) {
                accepted = true;
                let decrease = value - next;
                std::mem::swap(&mut z, &mut candidate);
                value = next;
                history.push(value);
                if decrease <= tol * value.abs().max(1.0) {
                    converged = true;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted || converged {
            converged = true;
            break;
        }
        step = (step * 2.0).min(1.0);
    }
    Ok(KlOutcome { z, objective: value, iterations, converged, history })
}

fn normalize_with_floor(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v = (*v / sum).max(POSITIVITY_FLOOR);
    }
    let sum: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Gradient of the KL-chain objective up to a per-row constant.
fn kl_gradient(r: &LossMatrix, weight: f64, z: &FactorMatrix, out: &mut [f64]) {
    let (m, k) = (r.rows(), r.cols());
    out.copy_from_slice(&r.data);
    if weight == 0.0 {
        return;
    }
    for t in 0..m {
        for c in 0..k {
            let zt = z.data[t * k + c];
            let mut g = 0.0;
            if t + 1 < m {
                g += (zt / z.data[(t + 1) * k + c]).ln();
            }
            if t > 0 {
                g -= z.data[(t - 1) * k + c] / zt;
            }
            out[t * k + c] += weight * g;
        }
    }
}
