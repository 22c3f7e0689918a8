//! Command-line workflows: aggregate, fit, extrapolate, replicate, simulate.
//!
//! Every command writes its artifacts into `--out DIR`. Numeric columns use
//! 17 significant digits so that files re-read bitwise. Wall-clock timings
//! go to separate `timing.json` / `timings.csv` files; everything else is a
//! deterministic function of the inputs and the seed.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wh_core::{AxisRange, WhError};

mod commands;
mod table;

pub use commands::{run_aggregate, run_extrapolate, run_fit, run_replicate, run_simulate, FitState};

#[derive(Debug, Parser)]
#[command(name = "wh", version, about = "Whittaker-Henderson graduation of event/exposure tables")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate individual records into event counts and central exposures.
    Aggregate(AggregateArgs),
    /// Smooth an aggregate table.
    Fit(FitArgs),
    /// Extend a completed fit to a larger grid.
    Extrapolate(ExtrapolateArgs),
    /// Run a replicated simulation experiment.
    Replicate(ReplicateArgs),
    /// Simulate a portfolio of individual records.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Records CSV with header `x,t,delta` or `x,z,t,delta`.
    #[arg(long)]
    pub input: PathBuf,
    /// Age bounds `A..B`.
    #[arg(long, value_parser = parse_range)]
    pub x: AxisRange,
    /// Duration bounds `A..B` (2D).
    #[arg(long, value_parser = parse_range)]
    pub z: Option<AxisRange>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Outer,
    #[value(alias = "performance")]
    Perf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Aggregate CSV with header `x,d,ec` or `x,z,d,ec`.
    #[arg(long)]
    pub input: PathBuf,
    /// Expected dimension; checked against the input.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub dim: Option<u8>,
    /// Difference order on every axis.
    #[arg(long, default_value_t = 2)]
    pub q: usize,
    #[arg(long)]
    pub qx: Option<usize>,
    #[arg(long)]
    pub qz: Option<usize>,
    /// Fixed smoothing parameter (both axes in 2D).
    #[arg(long, conflicts_with = "auto")]
    pub lambda: Option<f64>,
    #[arg(long, conflicts_with = "auto")]
    pub lambda_x: Option<f64>,
    #[arg(long, conflicts_with = "auto")]
    pub lambda_z: Option<f64>,
    /// Select the smoothing parameters (the default).
    #[arg(long)]
    pub auto: bool,
    #[arg(long, value_enum, default_value = "perf")]
    pub method: Method,
    /// Basis budget for reduced-rank selection (performance method only).
    #[arg(long)]
    pub pmax: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExtrapolationMode {
    Constrained,
    Unconstrained,
}

#[derive(Debug, Args)]
pub struct ExtrapolateArgs {
    /// Output directory of a previous `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, value_parser = parse_range)]
    pub extend_x: Option<AxisRange>,
    #[arg(long, value_parser = parse_range)]
    pub extend_z: Option<AxisRange>,
    #[arg(long, value_enum, default_value = "constrained")]
    pub mode: ExtrapolationMode,
    /// Defaults to the level used by the fit.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Also write `ratio.csv`, unconstrained over constrained.
    #[arg(long)]
    pub compare: bool,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplicateArgs {
    /// normal-approx-bias, outer-vs-performance or rank-reduction-sweep.
    #[arg(long)]
    pub experiment: String,
    /// Replicates per scenario.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioName {
    #[value(name = "1d")]
    OneD,
    #[value(name = "1d-wide")]
    OneDWide,
    #[value(name = "2d")]
    TwoD,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "1d")]
    pub scenario: ScenarioName,
    /// Head count; the scenario default when omitted.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

fn parse_range(s: &str) -> Result<AxisRange, String> {
    s.parse::<AxisRange>().map_err(|e| e.to_string())
}

/// Process exit code for an error.
pub fn exit_code(e: &WhError) -> i32 {
    match e {
        WhError::Convergence { .. } | WhError::SelectionFailure(_) => 3,
        WhError::UndefinedPdet | WhError::SingularSystem(_) | WhError::Undefined(_) => 4,
        WhError::InvalidOrder { .. }
        | WhError::InvalidParameter(_)
        | WhError::DataInconsistency { .. }
        | WhError::InvalidEmbedding(_)
        | WhError::InvalidReduction { .. }
        | WhError::Parse { .. }
        | WhError::Io(_) => 2,
    }
}

pub fn run(cli: Cli) -> wh_core::Result<()> {
    match cli.command {
        Command::Aggregate(a) => run_aggregate(&a),
        Command::Fit(a) => run_fit(&a),
        Command::Extrapolate(a) => run_extrapolate(&a),
        Command::Replicate(a) => run_replicate(&a),
        Command::Simulate(a) => run_simulate(&a),
    }
}

/// Parses `args`, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
