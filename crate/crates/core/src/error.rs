use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("degenerate resultant (norm {norm:e}); mean direction undefined")]
    DegenerateResultant { norm: f64 },

    #[error("bad magic bytes {0:?} (expected \"VMF1\")")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated input while reading {0}")]
    Truncated(String),

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error("class `{class}` has {available} eligible images, {needed} required")]
    Capacity {
        class: String,
        needed: usize,
        available: usize,
    },

    #[error("no background proposals collected below IoU {threshold}")]
    NoNegatives { threshold: f64 },

    #[error("evaluation protocol violation: {0}")]
    Protocol(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by malformed or inconsistent input data, as
    /// opposed to invalid configuration.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::InvalidConfig(_))
    }
}
