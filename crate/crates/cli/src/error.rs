use std::path::PathBuf;

use lensrig_core::LensError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: std::io::Error },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] LensError),
}

impl CliError {
    /// 2 for configuration and IO problems, 1 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } | CliError::Write { .. } | CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                LensError::Io(_)
                | LensError::Csv(_)
                | LensError::Json(_)
                | LensError::Config(_)
                | LensError::InvalidArgument(_)
                | LensError::GridMismatch(_) => 2,
                _ => 1,
            },
        }
    }
}
