//! Error type of the command-line layer and its exit-status mapping.

use std::path::Path;

/// Process exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const INVARIANT: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags or flag combinations.
    #[error("usage: {0}")]
    Usage(String),
    /// Missing or malformed input files, invalid configuration values.
    #[error("{0}")]
    Data(String),
    /// A checked internal property did not hold.
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Data(_) => exit::DATA,
            CliError::Invariant(_) => exit::INVARIANT,
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }
}

impl From<ralm_core::Error> for CliError {
    fn from(e: ralm_core::Error) -> Self {
        match e {
            ralm_core::Error::Invariant(msg) => CliError::Invariant(msg),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
