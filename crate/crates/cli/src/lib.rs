//! Config-driven experiment runner for `retrofeat-core`: single runs,
//! strategy sweeps, result records, plot data and binary file formats.

use std::path::PathBuf;

pub mod config;
pub mod formats;
pub mod record;
pub mod report;
pub mod runner;
pub mod selftest;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("training diverged; diagnostic written to {}", .0.display())]
    NonFinite(PathBuf),
    #[error("{0}")]
    Core(#[from] retrofeat_core::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("record (de)serialisation failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("{0}")]
    Report(String),
    #[error("{} already exists and is never overwritten", .0.display())]
    Exists(PathBuf),
    #[error("{0}")]
    Child(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(retrofeat_core::Error::Config(_)) => EXIT_CONFIG,
            CliError::NonFinite(_) => EXIT_NON_FINITE,
            _ => EXIT_FAILURE,
        }
    }
}
