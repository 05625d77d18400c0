//! Config-driven front end for `measpoly`.
//!
//! Every subcommand reads one JSON config, writes its CSV outputs atomically
//! into the output directory and returns an exit code: 0 on success, 1 on a
//! domain failure (failed validation, non-affine spec, probe violation, …),
//! 2 on usage or schema errors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;

/// Environment variable overriding the output directory when `--out` is absent.
pub const OUT_ENV: &str = "MEASPOLY_OUT";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Schema(String),
    #[error("{0}")]
    Domain(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Schema(_) => 2,
            Self::Domain(_) | Self::Io(_) => 1,
        }
    }
}

impl From<measpoly::Error> for CliError {
    fn from(e: measpoly::Error) -> Self {
        Self::Domain(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "measpoly", version, about = "Measure-valued polynomial diffusions on a grid")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (default: $MEASPOLY_OUT, then the current directory).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the number of Monte Carlo paths.
    #[arg(long, global = true)]
    pub paths: Option<usize>,
    /// Overrides the number of time steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Check the admissibility conditions; JSON report on stdout.
    Validate,
    /// Conditional moments of a polynomial (moments.csv).
    Moments,
    /// Riccati solution and Laplace transform (laplace.csv).
    Laplace,
    /// Euler Monte Carlo ensemble (summary.csv, optional paths.bin).
    Simulate,
    /// Futures mean, standard deviation and MC bands (futures.csv).
    PriceFutures,
    /// Positive maximum principle probe (probe.csv).
    Probe,
}

/// Files and console text produced by a command.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<(String, Vec<u8>)>,
    pub stdout: String,
    /// Exit code 1 with outputs still written (failed checks).
    pub failed: bool,
}

pub fn out_dir(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".")),
    }
}

/// Writes `bytes` to `dir/name` through a temporary file in `dir`.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(dir.join(name)).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Schema("--config PATH is required".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Schema(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = config::RunConfig::parse(&text)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(paths) = cli.paths {
        cfg.solver.paths = Some(paths);
    }
    if let Some(steps) = cli.steps {
        cfg.solver.steps = Some(steps);
    }
    match cli.command {
        Command::Validate => commands::validate(&cfg),
        Command::Moments => commands::moments(&cfg),
        Command::Laplace => commands::laplace(&cfg),
        Command::Simulate => commands::simulate(&cfg),
        Command::PriceFutures => commands::price_futures(&cfg),
        Command::Probe => commands::probe(&cfg),
    }
}

/// Parses arguments, runs the command, writes outputs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = execute(&cli).and_then(|outcome| {
        let dir = out_dir(cli.out.as_deref());
        for (name, bytes) in &outcome.files {
            write_atomic(&dir, name, bytes)?;
        }
        Ok(outcome)
    });
    match result {
        Ok(outcome) => {
            print!("{}", outcome.stdout);
            i32::from(outcome.failed)
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
