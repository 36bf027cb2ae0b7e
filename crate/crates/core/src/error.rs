//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension disagreement between operands.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Input that makes the result undefined (for example a zero-norm vector).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An internal contract was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset problems (empty pools, undersized pools).
    #[error("data error: {0}")]
    Data(String),

    /// Prompt/checkpoint store failures.
    #[error("store error: {0}")]
    Store(String),

    /// Malformed binary or text artifact.
    #[error("format error: {0}")]
    Format(String),

    /// Text ingestion failure, with the offending line.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Token id outside the backbone vocabulary.
    #[error("vocab error: {0}")]
    Vocab(String),

    /// Sequence longer than the backbone allows.
    #[error("length error: {0}")]
    Length(String),

    /// Similarity normalization is impossible (non-positive self-similarity).
    #[error("normalization error: {0}")]
    Normalization(String),

    /// Failure while writing CSV/SVG artifacts.
    #[error("export error: {0}")]
    Export(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
