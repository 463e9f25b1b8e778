//! `cbrelab <subcommand> --config <path> [--seed N] [--out DIR]`
//!
//! Exit codes: 0 pass, 1 numerical or i/o fault, 2 statistical failure,
//! 3 failed precondition (not ergodic, Grey's condition), 4 config error.
//! `CBRELAB_THREADS` sets the worker count; results never depend on it.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Output;
use crate::config::{Config, Kind};
use crate::error::{CliError, Outcome};

#[derive(Debug, Parser)]
#[command(
    name = "cbrelab",
    version,
    about = "Forward and backward engines for branching processes in random environments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a config and print derived quantities.
    Validate(RunArgs),
    /// Write environment paths (t, xi) as CSV.
    EnvSample(RunArgs),
    /// Export process paths and check the Z martingale.
    Simulate(RunArgs),
    /// Compare Laplace transforms from both engines.
    Laplace(RunArgs),
    /// Compare extinction probabilities, or the long-run survival ladder.
    Extinction(RunArgs),
    /// Stationary Laplace transform, or convergence towards it.
    Stationary(RunArgs),
    /// Coalescence of the monotone coupling.
    Coupling(RunArgs),
    /// Short-time check of the generator.
    GeneratorCheck(RunArgs),
    /// Run a list of configs and aggregate their outcomes.
    Battery(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's `out`, else `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Command {
    fn split(&self) -> (Kind, &RunArgs) {
        match self {
            Command::Validate(a) => (Kind::Validate, a),
            Command::EnvSample(a) => (Kind::EnvSample, a),
            Command::Simulate(a) => (Kind::Simulate, a),
            Command::Laplace(a) => (Kind::Laplace, a),
            Command::Extinction(a) => (Kind::Extinction, a),
            Command::Stationary(a) => (Kind::Stationary, a),
            Command::Coupling(a) => (Kind::Coupling, a),
            Command::GeneratorCheck(a) => (Kind::GeneratorCheck, a),
            Command::Battery(a) => (Kind::Battery, a),
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("CBRELAB_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Config(format!("CBRELAB_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("cannot start {n} worker threads: {e}")))
}

fn execute(kind: Kind, args: &RunArgs) -> Result<Outcome, CliError> {
    init_threads()?;
    let mut cfg = Config::load(&args.config)?;
    if kind != Kind::Validate && cfg.kind != kind {
        return Err(CliError::Config(format!(
            "{}: config is of kind `{}`, not `{}`",
            args.config.display(),
            cfg.kind.name(),
            kind.name()
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let out = Output::new(dir, &cfg)?;
    match kind {
        Kind::Validate => commands::validate(&cfg, &out),
        Kind::Battery => commands::battery(&cfg, &out, args.seed),
        _ => commands::dispatch(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = cli.command.split();
    let outcome = execute(kind, args).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        e.outcome()
    });
    ExitCode::from(outcome.code())
}
