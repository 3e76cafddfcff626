use thiserror::Error;

/// Errors raised by the solver. Each variant names the subsystem it came from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("model evaluation produced a non-finite {what} at t={t} (path {path})")]
    ModelEvaluation {
        what: &'static str,
        t: f64,
        path: usize,
    },

    #[error("maximizer invalid at sample {sample}: h(Λ) falls short of the grid maximum by {violation:.3e}")]
    MaximizerInvalid { sample: usize, violation: f64 },

    #[error("simulation produced a non-finite state at t={t} (path {path})")]
    Simulation { t: f64, path: usize },

    #[error("measure error: {0}")]
    Measure(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("stochastic exponential overflow (max |log E| = {max_log:.3e})")]
    WeightOverflow { max_log: f64 },

    #[error("regression failed: {reason} (condition number {condition:.3e})")]
    Regression { reason: String, condition: f64 },

    #[error("BSDE driver produced a non-finite value at step {step} (path {path})")]
    NonFiniteDriver { step: usize, path: usize },

    #[error("a-priori bounds unavailable: {0}")]
    BoundsUnavailable(String),

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Name of the module that raised the error.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Parameter { .. } | Error::Io(_) | Error::Json(_) => "config",
            Error::ModelEvaluation { .. } | Error::MaximizerInvalid { .. } | Error::UnknownModel(_) => "model",
            Error::Simulation { .. } => "paths",
            Error::Measure(_) | Error::GridMismatch(_) => "measure",
            Error::WeightOverflow { .. } => "girsanov",
            Error::Regression { .. } | Error::NonFiniteDriver { .. } => "bsde",
            Error::BoundsUnavailable(_) => "fixedpoint",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Error {
    Error::Parameter {
        name,
        reason: reason.into(),
    }
}
