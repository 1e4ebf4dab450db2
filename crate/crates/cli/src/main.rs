//! `ringflow`: dataset preparation, training, sampling and evaluation of
//! ring puckering ensembles.
//!
//! Exit codes: 0 success, 2 partial success, 64 usage, 65 data, 70 internal.

mod commands;
mod config;
mod report;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;

pub const EXIT_PARTIAL: u8 = 2;
pub const EXIT_USAGE: u8 = 64;
pub const EXIT_DATA: u8 = 65;
pub const EXIT_INTERNAL: u8 = 70;

/// A mistake in how the program was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Input files that are well-formed but unusable together.
#[derive(Debug)]
pub struct DataError(pub String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

/// Whether a command did all of its work.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    Partial,
}

#[derive(Parser, Debug)]
#[command(name = "ringflow", version, about = "Ring conformer generation in puckering space")]
struct Cli {
    /// Run configuration (TOML); flags override its values.
    #[arg(long, global = true, env = "RINGFLOW_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert between Cartesian datasets and puckering coordinates.
    Convert(ConvertArgs),
    /// Write seeded ring-level train/validation/test manifests.
    Split(SplitArgs),
    /// Tabulate bond lengths and angles over a training split.
    BuildTable(BuildTableArgs),
    /// Train the vector field.
    Train(TrainArgs),
    /// Generate conformers for the rings of a split.
    Sample(SampleArgs),
    /// Score samples against references, alongside the prior baseline.
    Eval(EvalArgs),
    /// Write aggregate tables and puckering-space figures.
    Report(ReportArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    Cart2cp,
    Cp2cart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum)]
    pub direction: Direction,
    /// Bond table, required for cp2cart.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Also write the Cartesian structures as multi-frame XYZ.
    #[arg(long)]
    pub xyz: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Seed of the first split; split `i` uses `seed + i - 1`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 5)]
    pub splits: usize,
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
}

#[derive(Args, Debug)]
pub struct BuildTableArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub subset: Subset,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Conformers per ring; defaults to min(50, 2L) for L references.
    #[arg(long)]
    pub count: Option<usize>,
    /// Store every trajectory point.
    #[arg(long)]
    pub trajectories: bool,
    /// Directory for one multi-frame XYZ file per ring.
    #[arg(long)]
    pub xyz: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub samples: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub subset: Subset,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Minimize RMSD over ring automorphisms.
    #[arg(long)]
    pub automorphisms: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<PathBuf>,
    /// References to draw next to the samples.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// k-means representatives per ring.
    #[arg(long, default_value_t = 3)]
    pub representatives: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use ringflow_core::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if err.downcast_ref::<DataError>().is_some() {
        return EXIT_DATA;
    }
    if let Some(e) = err.downcast_ref::<E>() {
        return match e {
            E::InvalidArgument(_) => EXIT_USAGE,
            E::NonFiniteLoss { .. } | E::KeyKindMismatch => EXIT_INTERNAL,
            _ => EXIT_DATA,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() || err.downcast_ref::<serde_json::Error>().is_some() {
        return EXIT_DATA;
    }
    EXIT_INTERNAL
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Convert(a) => commands::convert(&a),
        Command::Split(a) => commands::split(&a, &cfg),
        Command::BuildTable(a) => commands::build_table_cmd(&a, &cfg),
        Command::Train(a) => commands::train(&a, &cfg),
        Command::Sample(a) => commands::sample(&a, &cfg),
        Command::Eval(a) => commands::eval(&a, &cfg),
        Command::Report(a) => report::report(&a, &cfg),
        Command::Selftest(a) => selftest::selftest(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Complete) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(EXIT_PARTIAL),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
