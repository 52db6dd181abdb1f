use thiserror::Error;

/// Errors surfaced by tensor construction, tape operations and gradient checks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected shape {expected}, got {found:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        found: Vec<usize>,
    },

    #[error("index out of range in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    #[error("invalid configuration for {op}: {detail}")]
    Config { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invariant violation in {op}: {detail}")]
    Invariant { op: &'static str, detail: String },

    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;
