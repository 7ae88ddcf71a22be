//! `flowstate` command line: train, forecast, evaluate, resample-eval,
//! generate, gradcheck.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Invalid flags, configs or inputs; maps to exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser)]
#[command(name = "flowstate", version, about = "Continuous-time state-space forecaster")]
struct Cli {
    /// Directory that receives every output file.
    #[arg(long, global = true, default_value = "flowstate-out")]
    output_dir: PathBuf,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config; writes checkpoint.json and train_log.csv.
    Train(TrainArgs),
    /// Quantile forecasts for every series in a dataset file.
    Forecast(ForecastArgs),
    /// Score a model (or the seasonal-naive baseline) on held-out splits.
    Evaluate(EvaluateArgs),
    /// MAE of one series subsampled by each factor.
    ResampleEval(ResampleArgs),
    /// Write synthetic series in long CSV format.
    Generate(GenerateArgs),
    /// Finite-difference check of every differentiable primitive.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Run config (TOML, or JSON by extension) with [model], [train], [data].
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total optimizer steps; overrides [train].steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Seed for initialization and training; overrides both config seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset file; overrides [data].path.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many total steps are done (the schedule still spans --steps).
    #[arg(long)]
    stop_after: Option<usize>,
    /// Save a checkpoint every N steps (0: only at the end).
    #[arg(long, default_value_t = 100)]
    checkpoint_every: usize,
}

#[derive(Args, Serialize, Clone)]
struct DataArgs {
    /// Manifest JSON with per-series seasonality, horizon and split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Dataset layout.
    #[arg(long, default_value = "auto", value_parser = ["auto", "long", "wide"])]
    format: String,
    /// Steps per season; overrides the manifest.
    #[arg(long)]
    seasonality: Option<f64>,
    /// Forecast horizon in steps; overrides the manifest.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args, Serialize, Clone)]
struct ModelRunArgs {
    /// Forecast extension mode.
    #[arg(long, value_enum, default_value_t = ModeArg::Mpi)]
    mode: ModeArg,
    /// Use this time-scale factor instead of 24 / seasonality.
    #[arg(long)]
    scale_override: Option<f64>,
    /// Cap on the context length in base steps (default: the model's).
    #[arg(long)]
    context_budget: Option<usize>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Mpi,
    Autoregressive,
}

impl From<ModeArg> for flowstate::forecast::Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Mpi => Self::Mpi,
            ModeArg::Autoregressive => Self::Autoregressive,
        }
    }
}

#[derive(Args, Serialize)]
struct ForecastArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file with the history to forecast from.
    #[arg(long)]
    series: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: ModelRunArgs,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    /// Model checkpoint; omit with --naive.
    #[arg(long, required_unless_present = "naive")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: ModelRunArgs,
    /// Evaluate the seasonal-naive baseline instead of a model.
    #[arg(long)]
    naive: bool,
}

#[derive(Args, Serialize)]
struct ResampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    series: PathBuf,
    /// Series id to use (default: the first).
    #[arg(long)]
    id: Option<String>,
    /// Channel to use.
    #[arg(long, default_value_t = 0)]
    channel: usize,
    /// Seasonality of the original series (default: from the manifest).
    #[arg(long)]
    seasonality: Option<f64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "auto", value_parser = ["auto", "long", "wide"])]
    format: String,
    /// Subsampling factors: `a..b` (inclusive) or a comma list.
    #[arg(long, default_value = "1..13")]
    factors: String,
    /// Forecast length in subsampled steps.
    #[arg(long, default_value_t = 480)]
    target: usize,
    /// Forecast every version with a time-scale factor of 1.
    #[arg(long)]
    no_scale_adjust: bool,
    #[arg(long, value_enum, default_value_t = ModeArg::Mpi)]
    mode: ModeArg,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum KindArg {
    Sinmix,
    GpKernel,
    TrendNoise,
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    /// Generator family with default parameters.
    #[arg(long, value_enum, default_value_t = KindArg::Sinmix)]
    kind: KindArg,
    /// TOML file with generator parameters (`kind = ...`); overrides --kind.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 720)]
    length: usize,
    /// Seed of the first series; series i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write a manifest with this seasonality and --horizon.
    #[arg(long, requires = "horizon")]
    seasonality: Option<f64>,
    #[arg(long, requires = "seasonality")]
    horizon: Option<usize>,
}

#[derive(Args, Serialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum relative error per primitive.
    #[arg(long, default_value_t = flowstate::gradcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Corrupt the analytic gradient of this primitive (negative control).
    #[arg(long)]
    inject_fault: Option<String>,
    #[arg(long, default_value_t = 1e-2)]
    fault_magnitude: f64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|c| {
        c.is::<UsageError>() || matches!(c.downcast_ref::<flowstate::Error>(), Some(flowstate::Error::Config(_)))
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    flowstate::par::init_thread_pool_from_env();
    let result = match &cli.command {
        Command::Train(a) => commands::train(&cli.output_dir, a),
        Command::Forecast(a) => commands::forecast(&cli.output_dir, a),
        Command::Evaluate(a) => commands::evaluate(&cli.output_dir, a),
        Command::ResampleEval(a) => commands::resample_eval(&cli.output_dir, a),
        Command::Generate(a) => commands::generate(&cli.output_dir, a),
        Command::Gradcheck(a) => commands::gradcheck(&cli.output_dir, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
