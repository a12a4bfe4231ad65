use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("embedding output has zero norm before normalisation")]
    ZeroNormOutput,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite gradient")]
    NonFiniteGradient,

    #[error("gamma must lie in (0, 1], got {0}")]
    InvalidGamma(f64),

    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },

    #[error("could not place {identities} centroids in {dim} dimensions after {attempts} attempts")]
    CentroidRejectionExhausted {
        identities: usize,
        dim: usize,
        attempts: usize,
    },

    #[error("corpus cosine margin {margin:.3} below {required:.3} after {attempts} attempts")]
    MarginNotReached {
        margin: f64,
        required: f64,
        attempts: usize,
    },

    #[error("gallery is empty")]
    EmptyGallery,

    #[error("query identity {0} does not appear in the gallery")]
    QueryIdentityMissing(u32),

    #[error("batch is empty")]
    EmptyBatch,

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }
}
