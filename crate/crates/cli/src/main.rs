//! `puflab` — simulate delay-based PUFs, collect attack datasets, run the
//! modeling attacks and validate the flip-probability theory.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{attack, collect, report, simulate, theory};

#[derive(Parser)]
#[command(
    name = "puflab",
    version,
    about = "Arbiter-PUF simulation and divide-and-conquer modeling attacks",
    propagate_version = true
)]
struct Cli {
    /// Cap worker threads for parallel phases (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Single-threaded execution with ordered reductions. Outputs are
    /// seed-deterministic either way; this removes scheduling variance in
    /// timing fields too.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize a ground-truth PUF instance as JSON.
    Simulate(simulate::SimulateArgs),
    /// Collect a chosen-challenge or reliability dataset from an instance.
    Collect(collect::CollectArgs),
    /// Run a modeling attack against a collected dataset.
    #[command(subcommand)]
    Attack(attack::AttackCommand),
    /// Validate the analytic flip-probability results by simulation.
    ValidateTheory(theory::TheoryArgs),
    /// Aggregate attack reports into a summary table.
    Report(report::ReportArgs),
}

/// Exit codes: 0 success, 2 invalid configuration, 3 attack-declared
/// failure, 4 I/O.
fn exit_code_for(err: &puflab_core::Error) -> u8 {
    use puflab_core::Error::*;
    match err {
        LengthMismatch { .. } | InvalidParameter(_) | InvalidChallenge(_)
        | InvalidFeatureVector(_) | InvalidPuf(_) | NeighborBudget { .. } => 2,
        Degenerate(_) | Optimizer(_) => 3,
        Malformed { .. } | Io(_) | Json(_) | Csv(_) => 4,
    }
}

pub(crate) enum CliError {
    Core(puflab_core::Error),
    /// An attack ran but declared failure (for example: no reliability
    /// signal on a noiseless target).
    AttackFailed(String),
    Usage(String),
}

impl From<puflab_core::Error> for CliError {
    fn from(e: puflab_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub(crate) type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();

    let threads = if cli.deterministic {
        Some(1)
    } else {
        cli.workers
    };
    if let Some(threads) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: failed to configure worker pool: {e}");
            return ExitCode::from(2);
        }
    }

    let outcome = match cli.command {
        Command::Simulate(args) => simulate::run(args),
        Command::Collect(args) => collect::run(args),
        Command::Attack(args) => attack::run(args),
        Command::ValidateTheory(args) => theory::run(args),
        Command::Report(args) => report::run(args),
    };

    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(CliError::AttackFailed(message)) => {
            eprintln!("attack failed: {message}");
            ExitCode::from(3)
        }
        Err(CliError::Core(err)) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
