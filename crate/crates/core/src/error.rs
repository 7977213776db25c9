use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands disagree on shape or channel count.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The gradient check cannot give a verdict: the function is not
    /// deterministic, or too many coordinates straddle a kink.
    #[error("gradient check invalid: {0}")]
    CheckInvalid(String),

    #[error("format error in {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("sample rate error in {}: {msg}", path.display())]
    Rate { path: PathBuf, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("overlapping events in {}: {msg}", path.display())]
    Overlap { path: PathBuf, msg: String },

    /// The synthesis spec cannot be realised (e.g. events do not fit).
    #[error("synthesis spec error: {0}")]
    Spec(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("io error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("malformed manifest: {0}")]
    Manifest(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
