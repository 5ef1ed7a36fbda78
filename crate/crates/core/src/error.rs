//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// Variants are grouped by origin so the CLI can map them onto exit codes:
/// everything except [`Error::Internal`] is a user, data, or configuration
/// problem (exit code 2); `Internal` signals a bug (exit code 1).
#[derive(Debug, Error)]
pub enum Error {
    /// A row or line could not be parsed at all.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A record parsed but violated a dataset invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A split request could not be honored.
    #[error("split error: {0}")]
    Split(String),

    /// Calibration could not produce a threshold.
    #[error("calibration error: {0}")]
    Calibration(String),

    /// An argument was outside its documented domain.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Set prediction failed for a record.
    #[error("prediction error: {0}")]
    Prediction(String),

    /// A fairness audit precondition failed.
    #[error("audit error: {0}")]
    Audit(String),

    /// Human-response simulation failed.
    #[error("simulation error: {0}")]
    Simulation(String),

    /// Model fitting or OR extraction failed.
    #[error("inference error: {0}")]
    Inference(String),

    /// Run configuration is missing or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Invariant violation inside the toolkit itself.
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    /// Process exit code for the CLI: 2 for user/config errors, 1 for bugs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Internal(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
