use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A radar frame failed validation (non-finite or negative rates, bad georef).
    #[error("invalid frame: {0}")]
    InvalidFrame(String),

    /// A serialized artifact is malformed. `offset` is the byte position at
    /// which decoding failed.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    /// Array dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Configuration rejected before any work started.
    #[error("bad config: {0}")]
    Config(String),

    /// A dataset/stream precondition does not hold (empty stratum, cadence
    /// violation, overlapping split, ...).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Misuse of the tape (detached tensor, non-scalar loss).
    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// Ground truth is all-positive or all-negative for a threshold, so no
    /// PR curve exists.
    #[error("degenerate evaluation set at rain threshold index {threshold_index}: {reason}")]
    DegenerateSet {
        threshold_index: usize,
        reason: String,
    },

    /// An optimizer step saw a non-finite gradient and was rejected.
    #[error("non-finite gradient in '{param}' at step {step}")]
    NonFiniteGradient { param: String, step: u64 },

    /// Checkpoint/config hash disagreement.
    #[error("config hash mismatch: checkpoint carries {found}, expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
