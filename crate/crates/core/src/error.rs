use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the model, data and training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate attention row {row}: every entry is masked out")]
    DegenerateAttentionRow { row: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("point lies behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("non-deterministic loss: two evaluations at the same point gave {0} and {1}")]
    NonDeterministic(f64, f64),
    #[error("frozen parameter group `{0}` was modified")]
    FrozenMutation(String),
    #[error("corrupt container {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("io error on {path}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid json")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
