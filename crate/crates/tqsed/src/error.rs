//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller handed us data that violates a precondition (empty waveform,
    /// non-finite samples, sample-rate mismatch, unknown query, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Tensor/matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration is internally inconsistent (COLA violation, channel
    /// widths, unknown config keys, ...). Raised at build time, not per call.
    #[error("configuration error: {0}")]
    Config(String),

    /// A metric has no defined value on this input (e.g. no reference
    /// activity at all).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Structured-text parse failure with location.
    #[error("parse error in {path} (line {line}): {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Checkpoint archive problems (bad magic, unknown format tag,
    /// truncated blobs).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable error kind, used by the CLI's JSON output
    /// and mapped to status codes by the C API.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Wav(_) => "wav",
            Error::Json(_) => "json",
        }
    }
}
