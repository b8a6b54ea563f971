use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("{method} diverged at iteration {iteration}: {cause}")]
    Divergence { method: String, iteration: usize, cause: String, manifest: PathBuf },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("malformed snapshot {path}: {msg}")]
    Snapshot { path: PathBuf, msg: String },

    #[error(transparent)]
    Core(#[from] distill_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for bad input, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) | CliError::Snapshot { .. } => 2,
            CliError::Divergence { .. } => 3,
            _ => 1,
        }
    }
}
