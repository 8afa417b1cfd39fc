use thiserror::Error;

/// Errors raised anywhere in the forecasting, evaluation and backtest pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input file; `row` is 1-based and counts the header.
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("insufficient data: need at least {required}, got {actual} ({context})")]
    InsufficientData {
        required: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("autodiff: {0}")]
    Graph(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn insufficient(required: usize, actual: usize, context: &'static str) -> Self {
        Error::InsufficientData {
            required,
            actual,
            context,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
