use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mode mismatch: {0}")]
    Mode(String),

    #[error("unknown speaker: {0}")]
    UnknownSpeaker(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint config hash mismatch (expected {expected}, found {found})")]
    ConfigHash { expected: String, found: String },

    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short category label, used by the command-line front end in diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "numeric",
            Error::InvalidArgument(_) => "argument",
            Error::Mode(_) => "mode",
            Error::UnknownSpeaker(_) => "speaker",
            Error::Format { .. } => "format",
            Error::ConfigHash { .. } => "checkpoint",
            Error::Diverged { .. } => "divergence",
            Error::Io { .. } => "io",
            Error::Json(_) => "format",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
