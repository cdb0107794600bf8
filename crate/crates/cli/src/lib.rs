//! Command-line front end: `train`, `calibrate`, `sweep`, `flops`, `ablate`.
//!
//! Exit codes: 0 on success, 2 for usage or configuration problems, 3 when
//! training diverges to a non-finite loss.

pub mod args;
pub mod commands;
pub mod config;

use thiserror::Error;

pub use args::{Cli, Command};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] usnet::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(usnet::Error::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Runs one parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => commands::train(&a, out),
        Command::Calibrate(a) => commands::calibrate(&a, out),
        Command::Sweep(a) => commands::sweep(&a, out),
        Command::Flops(a) => commands::flops(&a, out),
        Command::Ablate(a) => commands::ablate(&a, out).map(|_| ()),
    }
}
