//! Error type shared by all modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Model description rejected at construction time.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// Particle index outside `0..n`.
    #[error("particle index {index} out of range (dimension {dim})")]
    IndexOutOfRange { index: usize, dim: usize },

    /// A rate evaluated outside `[0, rate_bound]`; the thinning sampler
    /// requires the declared bound to hold, so this is fatal rather than
    /// being clipped.
    #[error("rate f_{index} = {value} violates declared bounds [0, {bound}]")]
    RateBound {
        index: usize,
        value: f64,
        bound: f64,
    },

    /// A state or matrix entry became NaN/inf during integration.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Thinning produced no accepted jump before the configured cap.
    #[error("no jump accepted before t = {max_time}; raise max_time or check rates")]
    Timeout { max_time: f64 },

    /// Argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Not enough data for the requested estimate.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Caller-supplied configuration value is unusable.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Test function violates a precondition (support/region constraints).
    #[error("precondition violated: {0}")]
    Precondition(String),
}
