use std::path::PathBuf;

use lrvga::LrvgaError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(#[source] LrvgaError),

    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    /// 1 configuration, 2 numerical divergence, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 1,
            Self::Numerical(_) => 2,
            Self::Io { .. } => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

impl From<LrvgaError> for CliError {
    fn from(e: LrvgaError) -> Self {
        match e {
            LrvgaError::Io { path, source } => Self::io(path, source),
            LrvgaError::Parse { .. } => Self::Config(e.to_string()),
            other => Self::Numerical(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
