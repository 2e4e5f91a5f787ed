//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("message of {got} bytes exceeds capacity of {cap} bytes for version {version}")]
    CapacityExceeded { got: usize, cap: usize, version: u8 },

    #[error("unsupported QR version {0} (supported: 5..=8)")]
    UnsupportedVersion(u8),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("fusion matrix is numerically singular")]
    SingularMatrix,

    #[error("fusion matrix condition number {0:.3e} exceeds limit")]
    IllConditioned(f64),

    #[error("non-finite value produced in {0}")]
    NonFiniteValue(&'static str),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: u64, detail: String },

    #[error("no usable images found in {0}")]
    EmptyDataset(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
