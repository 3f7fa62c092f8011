//! Command-line driver: argument parsing, config merging, exit codes and the
//! visualization bundle.

pub mod args;
pub mod bundle;
mod commands;
pub mod config;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;
use rfx_core::RfxError;
use thiserror::Error;

use args::{Cli, Command};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_BUDGET: i32 = 4;
pub const EXIT_INTERNAL: i32 = 5;

/// Caps the worker count; results do not depend on it.
pub const THREADS_ENV: &str = "RFX_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] RfxError),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Internal(_) => EXIT_INTERNAL,
            CliError::Core(e) => match e {
                RfxError::Config(_) => EXIT_USAGE,
                RfxError::BudgetExceeded { .. } => EXIT_BUDGET,
                RfxError::EmptyNode => EXIT_INTERNAL,
                _ => EXIT_DATA,
            },
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| {
            CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got '{value}'"
            ))
        })?;
    // A pool may already exist when called from a test harness.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => commands::train_cmd(a),
        Command::Importance(a) => commands::importance_cmd(a),
        Command::Proximity(a) => commands::proximity_cmd(a),
        Command::Mds(a) => commands::mds_cmd(a),
        Command::Outliers(a) => commands::outliers_cmd(a),
        Command::MemEstimate(a) => commands::mem_estimate_cmd(a),
        Command::VizExport(a) => commands::viz_export_cmd(a),
        Command::Bench(a) => commands::bench_cmd(a),
    }
}

/// Runs one invocation and returns the process exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let argv = match config::merge(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match configure_threads().and_then(|()| dispatch(&cli)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
