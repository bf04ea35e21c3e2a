use thiserror::Error;

use crate::train::TrainingLog;

/// Errors raised by the core numerical routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("input validation error: {0}")]
    InputValidation(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("numeric overflow: {0}")]
    NumericOverflow(String),
    #[error("training diverged: {message}")]
    Training {
        message: String,
        log: Box<TrainingLog>,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
