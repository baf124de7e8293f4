use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("backward already run on this tape; re-run the forward pass first")]
    BackwardConsumed,

    #[error("temporal length too short for kernel: {context} has T={t} but kernel K={k}")]
    TemporalUnderflow { context: String, t: usize, k: usize },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure stems from user input (usage, configuration, files)
    /// rather than from a numerical or runtime problem.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Param(_) | Error::Parse { .. } | Error::Config(_) | Error::Shape { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
