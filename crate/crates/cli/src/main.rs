//! `pdmp`: simulation, jump-rate estimation and the Monte-Carlo bench from
//! the command line.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pdmp_core::estimators::EstimatorKind;
use pdmp_core::model::ModelConfig;
use pdmp_core::realdata::RateMethod;
use serde::Serialize;

use crate::error::{CliError, Diagnostic};
use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "pdmp",
    version,
    about = "Jump-rate estimation for piecewise-deterministic Markov processes"
)]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Invariant densities and asymptotic standard deviations of the TCP model.
    Theory(TheoryArgs),
    /// Simulate the embedded chain, optionally sampled on a time grid.
    Simulate(SimulateArgs),
    /// Kernel estimate of the jump rate from one simulated chain.
    Estimate(EstimateArgs),
    /// Projection (adaptive) estimate of the jump rate from one simulated chain.
    Adaptive(AdaptiveArgs),
    /// Full Monte-Carlo protocol from a JSON config.
    Bench(BenchArgs),
    /// Division-rate pipeline on a directory of lineage CSVs.
    Realdata(RealdataArgs),
    /// Simulate a fitted model with a given rate curve and compare with data.
    Validate(ValidateArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Theory(_) => "theory",
            Command::Simulate(_) => "simulate",
            Command::Estimate(_) => "estimate",
            Command::Adaptive(_) => "adaptive",
            Command::Bench(_) => "bench",
            Command::Realdata(_) => "realdata",
            Command::Validate(_) => "validate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ModelKind {
    Tcp,
    Growth,
}

#[derive(Debug, Clone, Args, Serialize)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ModelKind::Tcp)]
    model: ModelKind,
    /// Fragmentation factor of the TCP model.
    #[arg(long, default_value_t = 0.4)]
    kappa: f64,
    /// Exponential growth rate of the growth model.
    #[arg(long, default_value_t = 0.025)]
    theta: f64,
    /// Mean of the Gaussian division ratio.
    #[arg(long, default_value_t = 0.5)]
    ratio_mean: f64,
    /// Standard deviation of the Gaussian division ratio.
    #[arg(long, default_value_t = 0.04)]
    ratio_sd: f64,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        match self.model {
            ModelKind::Tcp => ModelConfig::Tcp { kappa: self.kappa },
            ModelKind::Growth => ModelConfig::Growth {
                theta: self.theta,
                ratio_mean: self.ratio_mean,
                ratio_sd: self.ratio_sd,
                rate: None,
            },
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct ChainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Number of jumps.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Initial state.
    #[arg(long, default_value_t = 1.0)]
    z0: f64,
}

#[derive(Debug, Args, Serialize)]
struct TheoryArgs {
    #[arg(long, default_value_t = 0.4)]
    kappa: f64,
    /// States as start:stop:step.
    #[arg(long, default_value = "0.1:4:0.01")]
    grid: String,
    /// Series truncation tolerance.
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    chain: ChainArgs,
    /// Jump table `k,z,z_minus,s,t`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sampling step of the continuous-time path.
    #[arg(long)]
    grid_dt: Option<f64>,
    /// Grid samples `time,size,division` of the trajectory.
    #[arg(long, requires = "grid_dt")]
    grid_out: Option<PathBuf>,
    /// Number of independent lineages written to `--lineage-dir`.
    #[arg(long, requires = "lineage_dir")]
    lineages: Option<usize>,
    /// Directory of lineage CSVs, one per lineage, sampled every `--grid-dt`
    /// (default 1).
    #[arg(long, requires = "lineages")]
    lineage_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum KernelEstimator {
    K,
    Ks,
    Amgo,
    Amg,
}

impl KernelEstimator {
    fn kind(self) -> EstimatorKind {
        match self {
            KernelEstimator::K => EstimatorKind::K,
            KernelEstimator::Ks => EstimatorKind::KS,
            KernelEstimator::Amgo => EstimatorKind::AMGO,
            KernelEstimator::Amg => EstimatorKind::AMG,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct EstimateArgs {
    #[command(flatten)]
    chain: ChainArgs,
    #[arg(long, value_enum)]
    estimator: KernelEstimator,
    /// Bandwidth of `k` and `ks`.
    #[arg(long, conflicts_with_all = ["bandwidth_s", "bandwidth_t"])]
    bandwidth: Option<f64>,
    /// Space bandwidth of `amgo` and `amg`.
    #[arg(long, requires = "bandwidth_t")]
    bandwidth_s: Option<f64>,
    /// Time bandwidth of `amgo` and `amg`.
    #[arg(long, requires = "bandwidth_s")]
    bandwidth_t: Option<f64>,
    /// States as start:stop:step.
    #[arg(long, default_value = "0.5:2.5:0.05")]
    grid: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum ProjectionEstimator {
    K,
    Ks,
}

#[derive(Debug, Args, Serialize)]
struct AdaptiveArgs {
    #[command(flatten)]
    chain: ChainArgs,
    #[arg(long, value_enum, default_value_t = ProjectionEstimator::Ks)]
    estimator: ProjectionEstimator,
    /// Left end of the projection interval.
    #[arg(long, default_value_t = 0.05)]
    a: f64,
    /// Right end of the projection interval.
    #[arg(long, default_value_t = 3.0)]
    b: f64,
    /// Largest dimension considered.
    #[arg(long, default_value_t = 25)]
    mbar: usize,
    /// Penalty constant.
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    /// States as start:stop:step.
    #[arg(long, default_value = "0.5:1.9:0.05")]
    grid: String,
    #[arg(long)]
    out: PathBuf,
    /// Fitted projections; defaults to `fit.json` beside `--out`.
    #[arg(long)]
    fit_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    /// ExperimentConfig as JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    Ks,
    AdaptiveKs,
    Amg,
}

impl From<MethodArg> for RateMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ks => RateMethod::Ks,
            MethodArg::AdaptiveKs => RateMethod::AdaptiveKs,
            MethodArg::Amg => RateMethod::Amg,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
struct PosteriorArgs {
    /// Start of the posterior simulation (log-size).
    #[arg(long, default_value_t = 1.5)]
    x0: f64,
    /// Jumps simulated.
    #[arg(long, default_value_t = 1000)]
    jumps: usize,
    /// Last grid positions kept for the comparison.
    #[arg(long, default_value_t = 10_000)]
    keep: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct RealdataArgs {
    /// Directory of `time,size,division` CSVs.
    #[arg(long)]
    input: PathBuf,
    /// Reference condition supplying the bandwidths.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(["25", "27", "37"]))]
    temp: String,
    #[arg(long, value_enum, default_value_t = MethodArg::Ks)]
    method: MethodArg,
    /// Rate grid as start:stop:step; defaults to the observed range.
    #[arg(long)]
    grid: Option<String>,
    #[command(flatten)]
    posterior: PosteriorArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ValidateArgs {
    /// Directory of `time,size,division` CSVs.
    #[arg(long)]
    input: PathBuf,
    /// Rate curve `x,estimate,failed` on log-size.
    #[arg(long)]
    rate_curve: PathBuf,
    #[command(flatten)]
    posterior: PosteriorArgs,
    #[arg(long)]
    out: PathBuf,
}

/// What a command produced, for the manifest.
struct Outcome {
    config: serde_json::Value,
    config_hash: Option<String>,
    seed: Option<u64>,
    outputs: Vec<PathBuf>,
    manifest: PathBuf,
}

fn run(cli: &Cli, argv: Vec<String>) -> Result<(), CliError> {
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {:?} workers: {e}", cli.jobs)))?;
    let outcome = pool.install(|| match &cli.command {
        Command::Theory(a) => commands::theory(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Estimate(a) => commands::estimate(a),
        Command::Adaptive(a) => commands::adaptive(a),
        Command::Bench(a) => commands::bench(a),
        Command::Realdata(a) => commands::realdata(a),
        Command::Validate(a) => commands::validate(a),
    })?;
    let manifest = RunManifest {
        subcommand: cli.command.name().into(),
        argv,
        config_hash: outcome
            .config_hash
            .unwrap_or_else(|| RunManifest::hash_config(&outcome.config)),
        config: outcome.config,
        seed: outcome.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        jobs: cli.jobs,
        outputs: outcome.outputs,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    manifest.write(&outcome.manifest)
}

fn report(kind: &str, message: String, exit_code: i32) -> ExitCode {
    let d = Diagnostic {
        kind,
        message,
        exit_code,
    };
    eprintln!(
        "{}",
        serde_json::to_string(&d).expect("diagnostic serializes")
    );
    ExitCode::from(exit_code as u8)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let message = e.render().to_string();
            let first = message.lines().next().unwrap_or_default();
            return report("UsageError", first.trim_start_matches("error: ").into(), 2);
        }
    };
    match run(&cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e.kind(), e.to_string(), e.exit_code()),
    }
}
