use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] dapt_core::Error),

    /// Bad arguments or configuration.
    #[error("{0}")]
    Usage(String),

    /// An output failed its post-write check.
    #[error("output check failed: {0}")]
    Validation(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// 2 for configuration and contract errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Core(dapt_core::Error::VocabTooSmall { .. } | dapt_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}
