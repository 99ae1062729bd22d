//! `moeplan` command line.
//!
//! Exit codes: 0 on success, 2 on user or validation errors (bad flags,
//! unreadable or invalid config), 1 on internal errors.

mod commands;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "moeplan",
    version,
    about = "Plan, simulate and check large-scale MoE training"
)]
struct Cli {
    /// TOML config file (model, cluster, job, precision).
    #[arg(short, long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set model.top_k=4`. Repeatable;
    /// later overrides win.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output format. Defaults to `table`, or `csv` for `sweep` and
    /// `numerics`.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,

    /// Seed; beats `job.seed` in the file, which beats $MOEPLAN_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Enumerate and rank parallelism plans.
    Plan(commands::plan::PlanArgs),
    /// Simulate one layer and roll it up to an iteration.
    Simulate(commands::simulate::SimulateArgs),
    /// Per-GPU memory of the job's plan.
    Memory(commands::memory::MemoryArgs),
    /// Sweep one parameter; EP dispatch times and the scale-up ratio.
    Sweep(commands::sweep::SweepArgs),
    /// Reduction and quantization error trials.
    Numerics(commands::numerics::NumericsArgs),
}

/// Flags every config-driven command shares.
#[derive(Debug, Clone)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let globals = Globals {
        config: cli.config,
        overrides: cli.overrides,
        seed: cli.seed,
    };
    let out = match cli.command {
        Command::Plan(a) => commands::plan::run(&globals, &a, cli.format.unwrap_or(Format::Table))?,
        Command::Simulate(a) => {
            commands::simulate::run(&globals, &a, cli.format.unwrap_or(Format::Table))?
        }
        Command::Memory(a) => {
            commands::memory::run(&globals, &a, cli.format.unwrap_or(Format::Table))?
        }
        Command::Sweep(a) => commands::sweep::run(&globals, &a, cli.format.unwrap_or(Format::Csv))?,
        Command::Numerics(a) => {
            commands::numerics::run(&globals, &a, cli.format.unwrap_or(Format::Csv))?
        }
    };
    print!("{out}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
