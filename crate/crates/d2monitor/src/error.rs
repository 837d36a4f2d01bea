//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, D2Error>;

#[derive(Debug, Error)]
pub enum D2Error {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("non-finite value in {0}")]
    NonFiniteValue(String),

    #[error("span [{lo},{hi}] out of range for {steps} steps")]
    SpanOutOfRange { lo: usize, hi: usize, steps: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("too few samples: {0}")]
    TooFewSamples(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("required channel missing: {0}")]
    ChannelMissing(&'static str),

    #[error("no trajectory has a hesitation step; cascade expert has no training data")]
    NoHesitationSamples,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
