use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the command-line pipelines.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] interference_core::Error),

    #[error("{path}: {source}")]
    Input {
        path: PathBuf,
        #[source]
        source: interference_core::Error,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing {path}; run `interference-lab {producer}` first (or pass --{flag})")]
    MissingArtifact { path: PathBuf, producer: &'static str, flag: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("output directory {0} is locked by another run; remove .interference-lab.lock if no run is active")]
    Locked(PathBuf),
}

impl CliError {
    /// Process exit code: 2 for bad input, 3 for runtime and numerical
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) | CliError::Input { source: e, .. } => {
                if e.is_validation() {
                    2
                } else {
                    3
                }
            }
            CliError::Config(_) | CliError::MissingArtifact { .. } => 2,
            CliError::Io { .. } | CliError::Locked(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}
