//! Crate-wide error type.
//!
//! Fallible operations return [`Result`]; contract violations on hot paths
//! (shape mismatches inside samplers and gradient loops) panic via `assert!`
//! and are documented per function.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or construction argument.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Serialized data failed shape or version validation.
    #[error("invalid model data: {0}")]
    Format(String),

    /// A gradient or parameter became NaN/inf. `what` names the tensor or
    /// sampler step where it was first observed.
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    /// Every importance weight underflowed: the observed transition is not
    /// explainable by any sampled action. `min_residual` is the smallest
    /// prediction residual among the candidates, for diagnosis.
    #[error("observed transition unexplainable by sampled actions (min residual {min_residual:.6e})")]
    UnexplainableTransition { min_residual: f64 },

    /// An operation that needs data received none.
    #[error("empty input: {0}")]
    Empty(String),

    /// Rejection sampling hit its retry cap.
    #[error("rejection sampling failed after {attempts} attempts: {hint}")]
    RetryLimit { attempts: usize, hint: String },

    /// Training produced non-finite parameters and was aborted.
    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite { what: what.into() }
    }

    pub fn empty(what: impl Into<String>) -> Self {
        Error::Empty(what.into())
    }
}
