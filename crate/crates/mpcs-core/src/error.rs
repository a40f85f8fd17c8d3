use thiserror::Error;

/// Errors produced by the numerical kernels.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("ODE integration diverged (non-finite state at step {step})")]
    IntegrationDiverged { step: usize },

    #[error("non-finite value at quadrature node ({x:?}, {s})")]
    QuadratureNonFinite { x: Vec<f64>, s: f64 },

    #[error("evaluation outside the positive-density region at ({x:?}, {s})")]
    Domain { x: Vec<f64>, s: f64 },

    #[error("cannot sample from a zero-mass window")]
    ZeroMassWindow,

    #[error("positions coincide within tolerance {eps}")]
    Coincidence { eps: f64 },

    #[error("non-finite term in configuration pairing")]
    NonFinitePairing,

    #[error("tangent vectors indexed by different configurations")]
    TangentIndexMismatch,

    #[error("series order {requested} exceeds truncation order {max}")]
    TruncationOverflow { requested: usize, max: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{skipped} of {total} Monte Carlo samples failed (limit {limit})")]
    TooManySkipped {
        skipped: usize,
        total: usize,
        limit: usize,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
