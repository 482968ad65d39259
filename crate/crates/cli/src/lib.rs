//! Command-line frontend: CSV ingestion, configuration, and the `estimate`,
//! `test` and `simulate` subcommands.

pub mod commands;
pub mod config;
pub mod io;
pub mod report;

use std::fmt;

/// Failure of a CLI command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, unreadable or malformed input.
    Data(String),
    /// Error raised by the estimation library.
    Core(scaledfx::Error),
}

impl CliError {
    /// 1 for data and configuration errors, 2 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Data(msg) => f.write_str(msg),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<scaledfx::Error> for CliError {
    fn from(e: scaledfx::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
