use thiserror::Error;

use crate::spectral::BasisId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("basis mismatch: expected {expected}, found {found}")]
    BasisMismatch { expected: BasisId, found: BasisId },

    #[error("time step {dt} exceeds the stability limit {limit}")]
    StepTooLarge { dt: f64, limit: f64 },

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("hypothesis check failed: {0}")]
    Hypothesis(String),

    #[error("empty sample")]
    EmptySample,

    #[error("integration horizon too short: t_max * ell = {0} < 5")]
    TailNotNegligible(f64),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("operator is not positive definite (min eigenvalue {0})")]
    NotPositive(f64),

    #[error("search bracket failure: {0}")]
    SearchBracket(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
