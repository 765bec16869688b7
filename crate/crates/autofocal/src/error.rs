//! Crate-wide error type.

/// Errors produced by any part of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A numeric argument left its mathematical domain (probability outside
    /// [0, 1], non-positive variance, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Incompatible shapes between batches, models or gradients.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid or inconsistent experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset generation or ingestion failure.
    #[error("data error: {0}")]
    Data(String),

    /// Checkpoint serialization or deserialization failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A forward pass recorded for an older parameter state was handed to
    /// `backward`.
    #[error("stale forward pass: model parameters changed since it was recorded")]
    StaleForwardPass,

    /// The optimizer received a NaN or infinite gradient.
    #[error("non-finite gradient at parameter index {index}")]
    NonFiniteGradient { index: usize },

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    /// A trace metric name was requested that the trace does not carry.
    #[error("unknown metric '{0}'")]
    UnknownMetric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
