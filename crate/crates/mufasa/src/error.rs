//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    DimensionMismatch {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("insufficient negatives: {0}")]
    InsufficientNegatives(String),

    #[error("empty sample: {0}")]
    EmptySample(String),

    #[error("gradient for parameter `{0}` has not been populated")]
    UnpopulatedGradient(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("unknown item id `{item_id}` at {path}:{line}")]
    UnknownItem {
        item_id: String,
        path: String,
        line: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short category tag used by the CLI to prefix messages and pick exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Parse { .. } | Error::UnknownItem { .. } | Error::Io(_) => "data",
            Error::DimensionMismatch { .. }
            | Error::ZeroNorm(_)
            | Error::DegenerateRow { .. }
            | Error::NonScalarLoss { .. }
            | Error::InsufficientNegatives(_)
            | Error::EmptySample(_)
            | Error::UnpopulatedGradient(_)
            | Error::NonFinite(_) => "numeric",
        }
    }

    /// Process exit code for the category (0 is reserved for success).
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "data" => 3,
            "numeric" => 4,
            _ => 1,
        }
    }
}
