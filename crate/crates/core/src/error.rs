//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible operand shapes, with the op name and the offending extents.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward root must be a scalar, got {0} elements")]
    NonScalarRoot(usize),

    #[error("parameter `{0}` is trainable but has no gradient")]
    MissingGrad(String),

    #[error("token {value} out of range (limit {limit})")]
    TokenOutOfRange { value: u32, limit: usize },

    #[error("class {class} out of range for {group} group at pixel ({y}, {x})")]
    ClassOutOfRange {
        group: &'static str,
        class: u16,
        y: usize,
        x: usize,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn format(detail: impl Into<String>) -> Self {
        Error::Format(detail.into())
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Error::InvalidArgument(detail.into())
    }
}
