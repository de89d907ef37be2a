mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mlqg::model::NoiseKind;
use mlqg::sim::SimMode;
use mlqg::synthesis::Compensator;

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mlqg", version, about = "Multiplicative-noise LQG synthesis and residual anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve for compensator gains and write gains.json.
    Synthesize(CommonArgs),
    /// Stability diagnostics and steady-state moments, written to analysis.json.
    Analyze(CommonArgs),
    /// Simulate the closed loop and write trace.csv.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Threshold used to fill the alarm column.
        #[arg(long)]
        alpha: Option<f64>,
        #[command(flatten)]
        anomaly: AnomalyArgs,
    },
    /// Tune the detector threshold from simulated residual moments.
    Tune(CommonArgs),
    /// Apply a threshold to a simulated run; writes alarms.csv and evaluation.json.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Threshold value; overrides --threshold.
        #[arg(long)]
        alpha: Option<f64>,
        /// threshold.json produced by `tune`.
        #[arg(long, value_name = "PATH")]
        threshold: Option<PathBuf>,
        #[command(flatten)]
        anomaly: AnomalyArgs,
    },
    /// Run the detector pipeline for both compensators; writes compare.json.
    Compare(CommonArgs),
    /// Tabulate the pipeline over a grid of multiplicative variances; writes sweep.csv.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', required = true, value_name = "S2,...")]
        grid: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "lqg,mlqg", value_parser = parse_compensator)]
        compensators: Vec<Compensator>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON system description.
    #[arg(long, value_name = "PATH", conflicts_with = "pendulum")]
    pub config: Option<PathBuf>,
    /// Use the built-in linearized pendulum benchmark.
    #[arg(long)]
    pub pendulum: bool,
    /// Variance of the first state and output multiplicative noise.
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long, default_value = "mlqg", value_parser = parse_compensator)]
    pub compensator: Compensator,
    #[arg(long, default_value_t = 1_000_000)]
    pub steps: usize,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config noise kind.
    #[arg(long, value_parser = parse_noise)]
    pub noise: Option<NoiseKind>,
    #[arg(long, default_value = "sampled", value_parser = parse_mode)]
    pub mode: SimMode,
    /// Number of raw moments of q used for the threshold.
    #[arg(long, default_value_t = 4)]
    pub moments: usize,
    /// Target false-alarm rate.
    #[arg(long, default_value_t = 0.05)]
    pub rate: f64,
    #[arg(long, default_value = ".", value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AnomalyArgs {
    /// First step with an additive sensor bias.
    #[arg(long, requires = "anomaly_bias")]
    pub anomaly_start: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub anomaly_channel: usize,
    #[arg(long, requires = "anomaly_start")]
    pub anomaly_bias: Option<f64>,
}

fn parse_compensator(s: &str) -> Result<Compensator, String> {
    s.parse().map_err(|e: mlqg::Error| e.to_string())
}

fn parse_noise(s: &str) -> Result<NoiseKind, String> {
    match s {
        "gaussian" => Ok(NoiseKind::Gaussian),
        "laplacian" => Ok(NoiseKind::Laplacian),
        other => Err(format!("unknown noise kind `{other}` (expected gaussian or laplacian)")),
    }
}

fn parse_mode(s: &str) -> Result<SimMode, String> {
    s.parse().map_err(|e: mlqg::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synthesize(c) => commands::synthesize(&c),
        Command::Analyze(c) => commands::analyze(&c),
        Command::Simulate { common, alpha, anomaly } => commands::simulate(&common, alpha, &anomaly),
        Command::Tune(c) => commands::tune(&c),
        Command::Evaluate {
            common,
            alpha,
            threshold,
            anomaly,
        } => commands::evaluate(&common, alpha, threshold.as_deref(), &anomaly),
        Command::Compare(c) => commands::compare(&c),
        Command::Sweep {
            common,
            grid,
            compensators,
        } => commands::sweep(&common, &grid, &compensators),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
