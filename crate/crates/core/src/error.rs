//! One error type for the whole crate.
//!
//! Variants map onto how the CLI classifies failures: `Config` means a bad
//! run description (caught before any work starts), everything else is a
//! runtime fault.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// Shape disagreement between operands. The message names both shapes.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A scalar argument outside its documented range.
    #[error("invalid argument to {op}: {detail}")]
    Argument { op: &'static str, detail: String },

    /// Input that is structurally valid but numerically unusable
    /// (zero-norm row, rank-collapsed feature matrix, ...).
    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    /// Iterative routine failed to converge or produced a non-finite value.
    #[error("numeric failure in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// Text that the tokenizer cannot represent.
    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    /// Sequence longer than the model's positional table allows.
    #[error("sequence length error: {0}")]
    SequenceLength(String),

    /// Invalid or internally inconsistent run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Corrupt or truncated data encountered while loading a dataset
    /// or a serialized tensor.
    #[error("ingestion error at {location}: {detail}")]
    Ingestion { location: String, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Dimension { op, detail: detail.into() }
    }

    pub fn argument(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Argument { op, detail: detail.into() }
    }

    pub fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Degenerate { op, detail: detail.into() }
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::Numeric { op, detail: detail.into() }
    }

    pub fn ingestion(location: impl Into<String>, detail: impl Into<String>) -> Self {
        CoreError::Ingestion { location: location.into(), detail: detail.into() }
    }
}
