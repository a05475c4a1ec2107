mod config;
mod data;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use dlfm_core::experiments::{
    forgetting_q_spec, io_hmm_spec, kmeans_spec, mixture_linreg_spec, repro, ExperimentConfig, ExperimentName,
    Metrics,
};
use dlfm_core::{fit, validate, DlfmError, FitResult, ModelSpec};
use serde::{Deserialize, Serialize};

use config::{FitConfig, SCHEMA_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Solver(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Solver(_) => 3,
        }
    }
}

impl From<DlfmError> for CliError {
    fn from(e: DlfmError) -> Self {
        match e {
            DlfmError::SubsolverFailure { .. } | DlfmError::RunFailure { .. } => CliError::Solver(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "dlfm", version, about = "Fit discrete latent factor models")]
struct Cli {
    /// Worker threads for restarts (default: logical processors).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Suppress progress output on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a CSV dataset.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Run record destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Generate an experiment dataset with its ground truth.
    Synth {
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, fit and score one of the built-in experiments.
    Repro {
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        /// Experiment configuration overriding the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        restarts: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WallTimes {
    load: f64,
    fit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunRecord {
    schema_version: u32,
    tool_version: String,
    spec: ModelSpec,
    ordered: bool,
    dataset_fingerprint: String,
    result: FitResult,
    wall_seconds: WallTimes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunMetrics {
    label: String,
    seed_used: u64,
    restart_index_of_best: usize,
    thetas: Vec<Vec<f64>>,
    metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricsReport {
    schema_version: u32,
    tool_version: String,
    experiment: ExperimentName,
    config: ExperimentConfig,
    runs: Vec<RunMetrics>,
    plots: Vec<String>,
}

fn read_text(path: &Path, what: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{what}: cannot read {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_name(name: &str) -> Result<ExperimentName, CliError> {
    name.parse().map_err(|e: DlfmError| CliError::Input(e.to_string()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    config: &Path,
    data_path: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    restarts: Option<usize>,
    eps: Option<f64>,
    max_iter: Option<usize>,
    quiet: bool,
) -> Result<(), CliError> {
    let start = Instant::now();
    let cfg = FitConfig::parse(&read_text(config, "config")?)?;
    let mut spec = cfg.to_spec()?;
    if let Some(s) = seed {
        spec.controls.seed = s;
    }
    if let Some(r) = restarts {
        spec.controls.restarts = r;
    }
    if let Some(e) = eps {
        spec.controls.eps = e;
    }
    if let Some(it) = max_iter {
        spec.controls.max_iter = it;
    }
    let (data, fingerprint) = data::read_dataset(data_path, cfg.ordered)?;
    validate(&spec, &data).into_result()?;
    let load = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let result = fit(&spec, &data)?;
    let fit_time = start.elapsed().as_secs_f64();
    if !quiet {
        let status = serde_json::to_value(result.status).expect("serializable");
        eprintln!(
            "objective {:.6e} after {} iterations ({}), best restart {}",
            result.objective,
            result.iterations,
            status.as_str().unwrap_or_default(),
            result.restart_index_of_best
        );
    }
    let record = RunRecord {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        spec,
        ordered: cfg.ordered,
        dataset_fingerprint: fingerprint,
        result,
        wall_seconds: WallTimes { load, fit: fit_time },
    };
    write_json(out, &record)
}

/// Fit configuration matching the experiment's canned model.
fn canned_fit_config(cfg: &ExperimentConfig) -> FitConfig {
    let (spec, ordered) = match cfg {
        ExperimentConfig::ConstrainedKmeans(c) => (kmeans_spec(c, true), false),
        ExperimentConfig::MixtureLinreg(c) => (mixture_linreg_spec(c), false),
        ExperimentConfig::ForgettingQ(c) => {
            let lambda = c.lambdas.iter().copied().fold(0.0, f64::max);
            (forgetting_q_spec(c, lambda), true)
        }
        ExperimentConfig::IoHmm(c) => (io_hmm_spec(c), true),
    };
    FitConfig::from_spec(&spec, ordered)
}

fn cmd_synth(name: &str, seed: u64, out: &Path, quiet: bool) -> Result<(), CliError> {
    let cfg = parse_name(name)?.default_config(seed);
    let syn = dlfm_core::experiments::generate(&cfg)?;
    data::write_dataset(out, &syn.data)?;
    if let Some(labels) = &syn.labels {
        let rows: Vec<Vec<f64>> = labels.iter().map(|l| vec![l as f64]).collect();
        data::write_table(&with_suffix(out, ".truth.csv"), &["label".into()], &rows)?;
    }
    if let Some(thetas) = &syn.thetas {
        let n = thetas.first().map_or(0, |t| t.len());
        let mut header = vec!["factor".to_string()];
        header.extend((0..n).map(|j| format!("theta{j}")));
        let rows: Vec<Vec<f64>> = thetas
            .iter()
            .enumerate()
            .map(|(k, t)| std::iter::once((k + 1) as f64).chain(t.iter().copied()).collect())
            .collect();
        data::write_table(&with_suffix(out, ".thetas.csv"), &header, &rows)?;
    }
    write_json(Some(&with_suffix(out, ".experiment.json")), &cfg)?;
    write_json(Some(&with_suffix(out, ".config.json")), &canned_fit_config(&cfg))?;
    if !quiet {
        eprintln!("wrote {} samples to {}", syn.data.m(), out.display());
    }
    Ok(())
}

fn cmd_repro(
    name: &str,
    seed: u64,
    out_dir: &Path,
    config: Option<&Path>,
    restarts: Option<usize>,
    quiet: bool,
) -> Result<(), CliError> {
    let experiment = parse_name(name)?;
    let mut cfg = match config {
        None => experiment.default_config(seed),
        Some(p) => {
            let cfg: ExperimentConfig = serde_json::from_str(&read_text(p, "config")?)
                .map_err(|e| CliError::Input(format!("config: {e}")))?;
            if cfg.name() != experiment {
                return Err(CliError::Input(format!("config: describes `{}`, not `{name}`", cfg.name())));
            }
            cfg
        }
    };
    if let Some(r) = restarts {
        match &mut cfg {
            ExperimentConfig::ConstrainedKmeans(c) => c.restarts = r,
            ExperimentConfig::MixtureLinreg(c) => c.restarts = r,
            ExperimentConfig::ForgettingQ(c) => c.restarts = r,
            ExperimentConfig::IoHmm(c) => c.restarts = r,
        }
    }
    let report = repro(&cfg)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut plots = Vec::new();
    for table in &report.tables {
        let file = format!("{}.csv", table.name);
        data::write_table(&out_dir.join(&file), &table.header, &table.rows)?;
        plots.push(file);
    }
    let runs = report
        .runs
        .iter()
        .map(|r| RunMetrics {
            label: r.label.clone(),
            seed_used: r.fit.seed_used,
            restart_index_of_best: r.fit.restart_index_of_best,
            thetas: r.fit.thetas.clone(),
            metrics: r.metrics.clone(),
        })
        .collect();
    let metrics = MetricsReport {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        experiment,
        config: report.config.clone(),
        runs,
        plots,
    };
    write_json(Some(&out_dir.join("metrics.json")), &metrics)?;
    if !quiet {
        for r in &metrics.runs {
            match r.metrics.accuracy {
                Some(acc) => eprintln!("{}: objective {:.6e}, accuracy {acc:.3}", r.label, r.metrics.objective),
                None => eprintln!("{}: objective {:.6e}", r.label, r.metrics.objective),
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Input("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Input(format!("--jobs: {e}")))?;
    }
    match cli.command {
        Command::Fit { config, data, out, seed, restarts, eps, max_iter } => {
            cmd_fit(&config, &data, out.as_deref(), seed, restarts, eps, max_iter, cli.quiet)
        }
        Command::Synth { name, seed, out } => cmd_synth(&name, seed, &out, cli.quiet),
        Command::Repro { name, seed, out_dir, config, restarts } => {
            cmd_repro(&name, seed, &out_dir, config.as_deref(), restarts, cli.quiet)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
