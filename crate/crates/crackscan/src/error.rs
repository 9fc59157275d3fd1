//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor operations, model evaluation, data handling,
/// and pipeline orchestration.
#[derive(Error, Debug)]
pub enum Error {
    /// Shape or dimension mismatch between tensors.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid operation argument (negative eps, alpha out of range, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A tensor contains NaN or infinite values.
    #[error("non-finite values: {0}")]
    NonFinite(String),

    /// Backward called on a non-scalar tensor or on a consumed graph.
    #[error("autograd error: {0}")]
    Autograd(String),

    /// Model graph construction or evaluation failure (unknown tap,
    /// unresolved parameter, invalid config).
    #[error("model error: {0}")]
    Model(String),

    /// Dataset manifest parse or validation failure.
    #[error("manifest error: {0}")]
    Manifest(String),

    /// Weight bundle encode/decode failure.
    #[error("weight bundle error: {0}")]
    Bundle(String),

    /// Training diverged or could not proceed.
    #[error("training error: {0}")]
    Train(String),

    /// Pipeline configuration file problem.
    #[error("config error: {0}")]
    Config(String),

    /// Empty input where at least one item is required.
    #[error("empty input: {0}")]
    Empty(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
