use std::path::PathBuf;

use thiserror::Error;
use uniattn_core::Error as CoreError;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact: {}", .0.display())]
    Missing(PathBuf),

    #[error("invalid artifact {}: {detail}", .path.display())]
    Corrupt { path: PathBuf, detail: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("theory checks failed: {0}")]
    Theory(String),

    #[error("i/o error on {}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) | CliError::Corrupt { .. } | CliError::Io { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Theory(_) => 5,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) | CoreError::Plan(_) | CoreError::Contract(_) | CoreError::Shape { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Numeric(e.to_string()),
        }
    }
}
