//! Pipeline orchestration for the command-line tool: configuration, the
//! simulate/run/reference/compare/report commands, and the run manifest.

pub mod commands;
pub mod config;
pub mod pipeline;

use thiserror::Error;

/// Command-level failures mapped onto process exit codes:
/// 2 config error, 3 I/O error, 4 stream-integrity error.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("stream integrity error: {0}")]
    Stream(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Stream(_) => 4,
        }
    }
}
