use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("entry ({row}, {col}) out of range for dimension {n}")]
    IndexOutOfRange { row: usize, col: usize, n: usize },

    #[error("invalid matrix structure: {0}")]
    InvalidStructure(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("singular triangular factor: zero or missing diagonal at row {row}")]
    SingularFactor { row: usize },

    #[error("dimension {n} exceeds the dense cap {cap}")]
    DenseCapExceeded { n: usize, cap: usize },

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("tape already consumed by a backward pass")]
    TapeConsumed,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
