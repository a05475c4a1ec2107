//! Synthetic benchmark generators, label-alignment metrics and the canned
//! model specifications used to reproduce them.

use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::{fit, FitResult, FitStatus};
use crate::error::{DlfmError, Result};
use crate::fsolve::Labels;
use crate::model::{ConstraintAtom, Controls, Dataset, LossAtom, ModelSpec, RegularizerAtom, INF};

/// Seeds used for the multi-seed benchmark runs.
pub const REPRO_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    ConstrainedKmeans,
    MixtureLinreg,
    ForgettingQ,
    IoHmm,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 4] = [
        ExperimentName::ConstrainedKmeans,
        ExperimentName::MixtureLinreg,
        ExperimentName::ForgettingQ,
        ExperimentName::IoHmm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::ConstrainedKmeans => "constrained_kmeans",
            ExperimentName::MixtureLinreg => "mixture_linreg",
            ExperimentName::ForgettingQ => "forgetting_q",
            ExperimentName::IoHmm => "io_hmm",
        }
    }

    pub fn default_config(self, seed: u64) -> ExperimentConfig {
        match self {
            ExperimentName::ConstrainedKmeans => ExperimentConfig::ConstrainedKmeans(KmeansConfig { seed, ..Default::default() }),
            ExperimentName::MixtureLinreg => ExperimentConfig::MixtureLinreg(MixtureLinregConfig { seed, ..Default::default() }),
            ExperimentName::ForgettingQ => ExperimentConfig::ForgettingQ(ForgettingQConfig { seed, ..Default::default() }),
            ExperimentName::IoHmm => ExperimentConfig::IoHmm(IoHmmConfig { seed, ..Default::default() }),
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = DlfmError;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentName::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| DlfmError::InvalidConfig(format!("unknown experiment `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KmeansConfig {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    /// Radius of the ℓ1 sphere the clean points lie on.
    pub radius: f64,
    pub sigma: f64,
    /// Center constraints `Aθ ≤ b`, one row per entry.
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            m: 500,
            n: 2,
            k: 4,
            radius: 2.0,
            sigma: 0.05,
            a: vec![vec![0.8, 0.6], vec![-0.7, 0.9], vec![-1.0, -0.5], vec![1.0, -1.0], vec![0.3, 0.9]],
            b: vec![1.0, 0.8, 0.6, 0.7, 0.8],
            restarts: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureLinregConfig {
    pub m: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    pub sigma: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for MixtureLinregConfig {
    fn default() -> Self {
        MixtureLinregConfig {
            m: 500,
            lo: vec![-10.0; 10],
            hi: vec![10.0; 10],
            thetas: vec![
                vec![-1.47, 0.07, 0.16, -2.02, 0.14, 0.33, 0.71, 0.80, 1.53, -0.26],
                vec![-0.12, 1.38, -1.25, 0.88, -0.80, 1.33, -1.43, -0.42, 0.90, -0.47],
                vec![1.14, -1.33, 0.16, 0.23, -1.20, -0.90, 1.40, 0.98, -1.11, 0.60],
            ],
            p: vec![0.4, 0.3, 0.3],
            sigma: 1.5,
            restarts: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgettingQConfig {
    pub m: usize,
    pub reward_probs: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    pub switch_period: usize,
    /// KL-chain weights to fit with, one run each.
    pub lambdas: Vec<f64>,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for ForgettingQConfig {
    fn default() -> Self {
        ForgettingQConfig {
            m: 200,
            reward_probs: vec![0.1, 0.2, 0.7],
            thetas: vec![vec![9.9, 9.9e-2, 9.9e-4, 9.9e-6, 9.9e-8], vec![-4.0, -0.8, -0.16, -0.032, -0.0064]],
            switch_period: 20,
            lambdas: vec![0.0, 1.0],
            restarts: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoHmmConfig {
    pub m: usize,
    pub lo: f64,
    pub hi: f64,
    pub thetas: Vec<Vec<f64>>,
    pub p_init: Vec<f64>,
    pub p_tr: Vec<Vec<f64>>,
    pub lambda_theta: f64,
    pub lambda_z: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for IoHmmConfig {
    fn default() -> Self {
        IoHmmConfig {
            m: 500,
            lo: -5.0,
            hi: 5.0,
            thetas: vec![vec![-2.0, 0.0], vec![2.0, 6.0], vec![3.0, -5.0]],
            p_init: vec![1.0, 0.0, 0.0],
            p_tr: vec![vec![0.90, 0.05, 0.05], vec![0.01, 0.98, 0.01], vec![0.03, 0.02, 0.95]],
            lambda_theta: 0.5,
            lambda_z: 1.0,
            restarts: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ExperimentConfig {
    ConstrainedKmeans(KmeansConfig),
    MixtureLinreg(MixtureLinregConfig),
    ForgettingQ(ForgettingQConfig),
    IoHmm(IoHmmConfig),
}

fn check_distribution(path: &str, p: &[f64], errors: &mut Vec<String>) {
    if p.iter().any(|v| !(*v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        errors.push(format!("{path} must be a probability vector"));
    }
}

impl ExperimentConfig {
    pub fn name(&self) -> ExperimentName {
        match self {
            ExperimentConfig::ConstrainedKmeans(_) => ExperimentName::ConstrainedKmeans,
            ExperimentConfig::MixtureLinreg(_) => ExperimentName::MixtureLinreg,
            ExperimentConfig::ForgettingQ(_) => ExperimentName::ForgettingQ,
            ExperimentConfig::IoHmm(_) => ExperimentName::IoHmm,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            ExperimentConfig::ConstrainedKmeans(c) => c.seed,
            ExperimentConfig::MixtureLinreg(c) => c.seed,
            ExperimentConfig::ForgettingQ(c) => c.seed,
            ExperimentConfig::IoHmm(c) => c.seed,
        }
    }

    pub fn check(&self) -> Result<()> {
        let mut errors = Vec::new();
        match self {
            ExperimentConfig::ConstrainedKmeans(c) => {
                if !(c.sigma >= 0.0) {
                    errors.push("sigma must be >= 0".into());
                }
                if c.a.len() != c.b.len() || c.a.iter().any(|r| r.len() != c.n) {
                    errors.push("a must have one row of length n per entry of b".into());
                }
            }
            ExperimentConfig::MixtureLinreg(c) => {
                if !(c.sigma >= 0.0) {
                    errors.push("sigma must be >= 0".into());
                }
                check_distribution("p", &c.p, &mut errors);
                let n = c.lo.len();
                if c.hi.len() != n || c.lo.iter().zip(&c.hi).any(|(l, h)| !(l < h)) {
                    errors.push("bounds must satisfy lo < hi".into());
                }
                if c.thetas.len() != c.p.len() || c.thetas.iter().any(|t| t.len() != n) {
                    errors.push("thetas must have one vector of length n per entry of p".into());
                }
            }
            ExperimentConfig::ForgettingQ(c) => {
                if c.reward_probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    errors.push("reward_probs must lie in [0, 1]".into());
                }
                if c.thetas.is_empty() || c.thetas.iter().any(|t| t.len() != c.thetas[0].len()) {
                    errors.push("thetas must share one length".into());
                }
                if c.switch_period == 0 {
                    errors.push("switch_period must be >= 1".into());
                }
                if c.lambdas.iter().any(|l| !(*l >= 0.0)) {
                    errors.push("lambdas must be >= 0".into());
                }
            }
            ExperimentConfig::IoHmm(c) => {
                let k = c.thetas.len();
                check_distribution("p_init", &c.p_init, &mut errors);
                if c.p_tr.len() != k || c.p_init.len() != k {
                    errors.push("p_tr and p_init must match the number of thetas".into());
                }
                for (i, row) in c.p_tr.iter().enumerate() {
                    check_distribution(&format!("p_tr[{i}]"), row, &mut errors);
                }
                if !(c.lo < c.hi) {
                    errors.push("bounds must satisfy lo < hi".into());
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(DlfmError::InvalidConfig(errors.join("; ")))
        }
    }
}

/// A generated dataset with whatever ground truth the generator knows.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub data: Dataset,
    pub labels: Option<Labels>,
    pub thetas: Option<Vec<Vec<f64>>>,
}

fn categorical<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|v| *v > 0.0).unwrap_or(p.len() - 1)
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma).expect("sigma checked to be >= 0")
}

pub fn gen_constrained_kmeans(cfg: &KmeansConfig) -> Result<Dataset> {
    ExperimentConfig::ConstrainedKmeans(cfg.clone()).check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = normal(cfg.sigma);
    let mut features = Vec::with_capacity(cfg.m * cfg.n);
    for _ in 0..cfg.m {
        // uniform on the ℓ1 sphere: a random orthant face, then uniform on it
        let signs: Vec<f64> = (0..cfg.n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let e: Vec<f64> = (0..cfg.n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = e.iter().sum();
        for j in 0..cfg.n {
            let clean = signs[j] * cfg.radius * e[j] / total;
            features.push(clean + if cfg.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 });
        }
    }
    Dataset::new(cfg.m, 1, cfg.n, features, 1, vec![0.0; cfg.m])
}

pub fn gen_mixture_linreg(cfg: &MixtureLinregConfig) -> Result<Synthetic> {
    ExperimentConfig::MixtureLinreg(cfg.clone()).check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = normal(cfg.sigma);
    let n = cfg.lo.len();
    let mut features = Vec::with_capacity(cfg.m * n);
    let mut obs = Vec::with_capacity(cfg.m);
    let mut labels = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        let x: Vec<f64> = (0..n).map(|j| rng.random_range(cfg.lo[j]..cfg.hi[j])).collect();
        let label = categorical(&mut rng, &cfg.p);
        let mean: f64 = x.iter().zip(&cfg.thetas[label]).map(|(a, b)| a * b).sum();
        let eps = if cfg.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        obs.push(mean + eps);
        features.extend(x);
        labels.push(label + 1);
    }
    Ok(Synthetic {
        data: Dataset::new(cfg.m, 1, n, features, 1, obs)?,
        labels: Some(Labels(labels)),
        thetas: Some(cfg.thetas.clone()),
    })
}

/// Label in effect at 1-based trial `t` when factors alternate every `period` trials.
pub fn switching_label(t: usize, period: usize, k: usize) -> usize {
    ((t - 1) / period) % k + 1
}

pub fn gen_forgetting_q(cfg: &ForgettingQConfig) -> Result<Synthetic> {
    ExperimentConfig::ForgettingQ(cfg.clone()).check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let arms = cfg.reward_probs.len();
    let n = cfg.thetas[0].len();
    let k = cfg.thetas.len();
    // history[τ] = u(t − τ)
    let mut history: Vec<Vec<f64>> = vec![vec![0.0; arms]; n];
    let mut features = Vec::with_capacity(cfg.m * arms * n);
    let mut obs = Vec::with_capacity(cfg.m * arms);
    let mut labels = Vec::with_capacity(cfg.m);
    for t in 1..=cfg.m {
        let label = switching_label(t, cfg.switch_period, k);
        let theta = &cfg.thetas[label - 1];
        let mut x = vec![0.0; arms * n];
        for r in 0..arms {
            for c in 0..n {
                x[r * n + c] = history[c][r];
            }
        }
        let v: Vec<f64> = (0..arms).map(|r| (0..n).map(|c| x[r * n + c] * theta[c]).sum()).collect();
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = v.iter().map(|vi| (vi - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let probs: Vec<f64> = w.iter().map(|wi| wi / total).collect();
        let action = categorical(&mut rng, &probs);
        let rewarded = rng.random::<f64>() < cfg.reward_probs[action];

        features.extend(x);
        obs.extend((0..arms).map(|r| if r == action { 1.0 } else { 0.0 }));
        labels.push(label);

        let mut u = vec![0.0; arms];
        if rewarded {
            u[action] = 1.0;
        }
        history.pop();
        history.insert(0, u);
    }
    Ok(Synthetic {
        data: Dataset::new(cfg.m, arms, n, features, arms, obs)?.ordered(true),
        labels: Some(Labels(labels)),
        thetas: Some(cfg.thetas.clone()),
    })
}

pub fn gen_io_hmm(cfg: &IoHmmConfig) -> Result<Synthetic> {
    ExperimentConfig::IoHmm(cfg.clone()).check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.thetas.first().map_or(0, |t| t.len());
    let mut features = Vec::with_capacity(cfg.m * n);
    let mut obs = Vec::with_capacity(cfg.m);
    let mut labels = Vec::with_capacity(cfg.m);
    let mut state = categorical(&mut rng, &cfg.p_init);
    for t in 0..cfg.m {
        if t > 0 {
            state = categorical(&mut rng, &cfg.p_tr[state]);
        }
        let mut x: Vec<f64> = (0..n - 1).map(|_| rng.random_range(cfg.lo..cfg.hi)).collect();
        x.push(1.0);
        let u: f64 = x.iter().zip(&cfg.thetas[state]).map(|(a, b)| a * b).sum();
        let prob = 1.0 / (1.0 + (-u).exp());
        obs.push(if rng.random::<f64>() < prob { 1.0 } else { 0.0 });
        features.extend(x);
        labels.push(state + 1);
    }
    Ok(Synthetic {
        data: Dataset::new(cfg.m, 1, n, features, 1, obs)?.ordered(true),
        labels: Some(Labels(labels)),
        thetas: Some(cfg.thetas.clone()),
    })
}

/// Generate the dataset of any experiment.
pub fn generate(cfg: &ExperimentConfig) -> Result<Synthetic> {
    match cfg {
        ExperimentConfig::ConstrainedKmeans(c) => {
            Ok(Synthetic { data: gen_constrained_kmeans(c)?, labels: None, thetas: None })
        }
        ExperimentConfig::MixtureLinreg(c) => gen_mixture_linreg(c),
        ExperimentConfig::ForgettingQ(c) => gen_forgetting_q(c),
        ExperimentConfig::IoHmm(c) => gen_io_hmm(c),
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Best agreement between `pred` and `truth` over all relabelings of `pred`.
///
/// The returned permutation maps predicted label `j` to truth label
/// `perm[j - 1]`; both are 1-based.
pub fn aligned_accuracy(pred: &Labels, truth: &Labels, k: usize) -> Result<(f64, Vec<usize>)> {
    if pred.len() != truth.len() {
        return Err(DlfmError::Shape(format!("{} predicted labels vs {} true labels", pred.len(), truth.len())));
    }
    if k == 0 || k > 8 {
        return Err(DlfmError::Unsupported(format!("alignment enumerates K! permutations; K = {k} is out of range")));
    }
    if pred.iter().chain(truth.iter()).any(|l| l == 0 || l > k) {
        return Err(DlfmError::Shape(format!("labels must lie in 1..={k}")));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (p, t) in pred.iter().zip(truth.iter()) {
        confusion[p - 1][t - 1] += 1;
    }
    let mut best = (0usize, (0..k).collect::<Vec<_>>());
    for perm in (0..k).permutations(k) {
        let hits: usize = perm.iter().enumerate().map(|(a, &b)| confusion[a][b]).sum();
        if hits > best.0 {
            best = (hits, perm);
        }
    }
    let accuracy = if pred.is_empty() { 1.0 } else { best.0 as f64 / pred.len() as f64 };
    Ok((accuracy, best.1.into_iter().map(|b| b + 1).collect()))
}

/// Relabel `pred` through a permutation from [`aligned_accuracy`].
pub fn relabel(pred: &Labels, perm: &[usize]) -> Labels {
    Labels(pred.iter().map(|l| perm[l - 1]).collect())
}

/// Reorder estimated parameters so index `j` matches truth factor `j`.
pub fn align_thetas(estimated: &[Vec<f64>], perm: &[usize]) -> Vec<Vec<f64>> {
    let mut out = estimated.to_vec();
    for (a, &b) in perm.iter().enumerate() {
        out[b - 1] = estimated[a].clone();
    }
    out
}

/// Root mean squared coordinate error for each factor.
pub fn parameter_rmse(estimated: &[Vec<f64>], truth: &[Vec<f64>]) -> Vec<f64> {
    estimated
        .iter()
        .zip(truth)
        .map(|(e, t)| {
            let sq: f64 = e.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum();
            (sq / t.len().max(1) as f64).sqrt()
        })
        .collect()
}

/// Row-normalized counts of consecutive label pairs; rows with no
/// transitions are uniform.
pub fn estimate_transition(labels: &Labels, k: usize) -> Result<Vec<Vec<f64>>> {
    if labels.len() < 2 {
        return Err(DlfmError::Shape("transition estimation needs at least two labels".into()));
    }
    if labels.iter().any(|l| l == 0 || l > k) {
        return Err(DlfmError::Shape(format!("labels must lie in 1..={k}")));
    }
    let mut counts = vec![vec![0usize; k]; k];
    for w in labels.windows(2) {
        counts[w[0] - 1][w[1] - 1] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                vec![1.0 / k as f64; k]
            } else {
                row.iter().map(|c| *c as f64 / total as f64).collect()
            }
        })
        .collect())
}

pub fn max_abs_deviation(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Canned specifications
// ---------------------------------------------------------------------------

fn controls(seed: u64, restarts: usize) -> Controls {
    Controls { seed, restarts, ..Controls::default() }
}

pub fn kmeans_spec(cfg: &KmeansConfig, constrained: bool) -> ModelSpec {
    let spec = ModelSpec::new(cfg.k, cfg.n, LossAtom::squared_distance()).with_controls(controls(cfg.seed, cfg.restarts));
    if constrained {
        spec.with_shared_constraints(vec![ConstraintAtom::Polyhedron { a: cfg.a.clone(), b: cfg.b.clone() }])
    } else {
        spec
    }
}

pub fn mixture_linreg_spec(cfg: &MixtureLinregConfig) -> ModelSpec {
    ModelSpec::new(cfg.thetas.len(), cfg.lo.len(), LossAtom::square()).with_controls(controls(cfg.seed, cfg.restarts))
}

pub fn forgetting_q_spec(cfg: &ForgettingQConfig, lambda: f64) -> ModelSpec {
    let n = cfg.thetas[0].len();
    let mut spec = ModelSpec::new(2, n, LossAtom::multinomial_logit())
        .with_controls(controls(cfg.seed, cfg.restarts))
        .with_factor_constraints(0, vec![ConstraintAtom::Nonneg, ConstraintAtom::MonotoneNonincreasing])
        .with_factor_constraints(1, vec![ConstraintAtom::Nonpos, ConstraintAtom::MonotoneNondecreasing]);
    if lambda > 0.0 {
        spec = spec.with_f_regularizer(RegularizerAtom::KlChain { weight: lambda });
    }
    spec
}

pub fn io_hmm_spec(cfg: &IoHmmConfig) -> ModelSpec {
    let k = cfg.thetas.len();
    let n = cfg.thetas[0].len();
    let first = |lo: f64, hi: f64| {
        let mut l = vec![-INF; n];
        let mut h = vec![INF; n];
        l[0] = lo;
        h[0] = hi;
        ConstraintAtom::Box { lo: l, hi: h }
    };
    let mut spec = ModelSpec::new(k, n, LossAtom::binary_logit())
        .with_controls(controls(cfg.seed, cfg.restarts))
        .with_p_regularizer(RegularizerAtom::GroupL2 { weight: cfg.lambda_theta })
        .with_f_regularizer(RegularizerAtom::KlChain { weight: cfg.lambda_z });
    // sign priors on the slope of each state
    let priors = [first(-INF, 0.0), first(0.0, INF), first(0.0, INF)];
    for (j, atom) in priors.into_iter().enumerate().take(k) {
        spec = spec.with_factor_constraints(j, vec![atom]);
    }
    spec
}

// ---------------------------------------------------------------------------
// Reproduction runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub objective: f64,
    pub iterations: usize,
    pub status: FitStatus,
    pub final_gap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub permutation: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parameter_rmse: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aligned_thetas: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transition_max_deviation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_constraint_violation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproRun {
    pub label: String,
    pub spec: ModelSpec,
    pub fit: FitResult,
    pub metrics: Metrics,
}

/// Plot data: a named table of numeric columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotTable {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlotTable {
    fn new(name: &str, header: &[&str]) -> Self {
        PlotTable { name: name.into(), header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub experiment: ExperimentName,
    pub config: ExperimentConfig,
    pub runs: Vec<ReproRun>,
    pub tables: Vec<PlotTable>,
}

impl ReproReport {
    pub fn run(&self, label: &str) -> Option<&ReproRun> {
        self.runs.iter().find(|r| r.label == label)
    }
}

fn base_metrics(fit: &FitResult) -> Metrics {
    let final_gap = fit.objective_trace.last().map_or(f64::NAN, |t| (t.after_p - t.after_f).abs());
    Metrics {
        objective: fit.objective,
        iterations: fit.iterations,
        status: fit.status,
        final_gap,
        accuracy: None,
        permutation: None,
        parameter_rmse: None,
        aligned_thetas: None,
        transition: None,
        transition_max_deviation: None,
        max_constraint_violation: None,
    }
}

fn max_violation(spec: &ModelSpec, thetas: &[Vec<f64>]) -> f64 {
    spec.constraints
        .iter()
        .zip(thetas)
        .flat_map(|(atoms, t)| atoms.iter().map(move |a| a.violation(t)))
        .fold(0.0, f64::max)
}

fn scored_run(
    label: &str,
    spec: ModelSpec,
    data: &Dataset,
    truth: &Labels,
    true_thetas: Option<&[Vec<f64>]>,
) -> Result<ReproRun> {
    let fit = fit(&spec, data)?;
    let mut metrics = base_metrics(&fit);
    let (acc, perm) = aligned_accuracy(&fit.labels, truth, spec.k)?;
    let aligned = align_thetas(&fit.thetas, &perm);
    metrics.accuracy = Some(acc);
    metrics.max_constraint_violation = Some(max_violation(&spec, &fit.thetas));
    if let Some(t) = true_thetas {
        metrics.parameter_rmse = Some(parameter_rmse(&aligned, t));
    }
    metrics.aligned_thetas = Some(aligned);
    metrics.permutation = Some(perm);
    Ok(ReproRun { label: label.into(), spec, fit, metrics })
}

fn theta_table(table: &mut PlotTable, tag: f64, truth: &[Vec<f64>], estimate: &[Vec<f64>]) {
    for (k, (t, e)) in truth.iter().zip(estimate).enumerate() {
        for (j, (tv, ev)) in t.iter().zip(e).enumerate() {
            table.rows.push(vec![tag, (k + 1) as f64, (j + 1) as f64, *tv, *ev]);
        }
    }
}

/// Generate the experiment's data, fit it with the canned specification and
/// score the result.
pub fn repro(cfg: &ExperimentConfig) -> Result<ReproReport> {
    cfg.check()?;
    let synthetic = generate(cfg)?;
    let data = &synthetic.data;
    let mut runs = Vec::new();
    let mut tables = Vec::new();
    match cfg {
        ExperimentConfig::ConstrainedKmeans(c) => {
            let mut points = PlotTable::new("points", &["x0", "x1", "label_constrained", "label_unconstrained"]);
            let mut centers = PlotTable::new("centers", &["constrained", "factor", "x0", "x1"]);
            for (label, constrained) in [("constrained", true), ("unconstrained", false)] {
                let spec = kmeans_spec(c, constrained);
                let fit = fit(&spec, data)?;
                let mut metrics = base_metrics(&fit);
                // violation of the constraint set, measured for both fits
                let poly = ConstraintAtom::Polyhedron { a: c.a.clone(), b: c.b.clone() };
                metrics.max_constraint_violation =
                    Some(fit.thetas.iter().map(|t| poly.violation(t)).fold(0.0, f64::max));
                for (k, t) in fit.thetas.iter().enumerate() {
                    let mut row = vec![if constrained { 1.0 } else { 0.0 }, (k + 1) as f64];
                    row.extend(t.iter().take(2));
                    centers.rows.push(row);
                }
                runs.push(ReproRun { label: label.into(), spec, fit, metrics });
            }
            for i in 0..data.m() {
                let x = data.feature(i);
                points.rows.push(vec![
                    x[0],
                    x.get(1).copied().unwrap_or(0.0),
                    runs[0].fit.labels[i] as f64,
                    runs[1].fit.labels[i] as f64,
                ]);
            }
            tables.push(points);
            tables.push(centers);
        }
        ExperimentConfig::MixtureLinreg(c) => {
            let truth = synthetic.labels.as_ref().expect("generator returns labels");
            let run = scored_run("fit", mixture_linreg_spec(c), data, truth, Some(&c.thetas))?;
            let mut thetas = PlotTable::new("thetas", &["run", "factor", "coordinate", "true", "recovered"]);
            theta_table(&mut thetas, 0.0, &c.thetas, run.metrics.aligned_thetas.as_ref().unwrap());
            let mut labels = PlotTable::new("labels", &["i", "true", "recovered"]);
            let aligned = relabel(&run.fit.labels, run.metrics.permutation.as_ref().unwrap());
            for (i, (t, p)) in truth.iter().zip(aligned.iter()).enumerate() {
                labels.rows.push(vec![(i + 1) as f64, t as f64, p as f64]);
            }
            runs.push(run);
            tables.push(thetas);
            tables.push(labels);
        }
        ExperimentConfig::ForgettingQ(c) => {
            let truth = synthetic.labels.as_ref().expect("generator returns labels");
            let mut thetas = PlotTable::new("thetas", &["lambda", "factor", "coordinate", "true", "recovered"]);
            let mut header = vec!["t".to_string(), "true".to_string()];
            let mut columns = Vec::new();
            for &lambda in &c.lambdas {
                let label = format!("lambda={lambda}");
                let run = scored_run(&label, forgetting_q_spec(c, lambda), data, truth, Some(&c.thetas))?;
                theta_table(&mut thetas, lambda, &c.thetas, run.metrics.aligned_thetas.as_ref().unwrap());
                header.push(format!("lambda_{lambda}"));
                columns.push(relabel(&run.fit.labels, run.metrics.permutation.as_ref().unwrap()));
                runs.push(run);
            }
            let mut labels = PlotTable { name: "labels".into(), header, rows: Vec::new() };
            for (i, t) in truth.iter().enumerate() {
                let mut row = vec![(i + 1) as f64, t as f64];
                row.extend(columns.iter().map(|col| col[i] as f64));
                labels.rows.push(row);
            }
            tables.push(labels);
            tables.push(thetas);
        }
        ExperimentConfig::IoHmm(c) => {
            let truth = synthetic.labels.as_ref().expect("generator returns labels");
            let k = c.thetas.len();
            let mut run = scored_run("fit", io_hmm_spec(c), data, truth, Some(&c.thetas))?;
            let aligned = relabel(&run.fit.labels, run.metrics.permutation.as_ref().unwrap());
            let transition = estimate_transition(&aligned, k)?;
            run.metrics.transition_max_deviation = Some(max_abs_deviation(&transition, &c.p_tr));
            let mut trans = PlotTable::new("transition", &["from", "to", "true", "estimated"]);
            for a in 0..k {
                for b in 0..k {
                    trans.rows.push(vec![(a + 1) as f64, (b + 1) as f64, c.p_tr[a][b], transition[a][b]]);
                }
            }
            run.metrics.transition = Some(transition);
            let mut labels = PlotTable::new("labels", &["t", "true", "recovered"]);
            for (i, (t, p)) in truth.iter().zip(aligned.iter()).enumerate() {
                labels.rows.push(vec![(i + 1) as f64, t as f64, p as f64]);
            }
            let mut thetas = PlotTable::new("thetas", &["run", "factor", "coordinate", "true", "recovered"]);
            theta_table(&mut thetas, 0.0, &c.thetas, run.metrics.aligned_thetas.as_ref().unwrap());
            runs.push(run);
            tables.push(labels);
            tables.push(thetas);
            tables.push(trans);
        }
    }
    Ok(ReproReport { experiment: cfg.name(), config: cfg.clone(), runs, tables })
}
