use thiserror::Error;

/// Errors raised by the simulation, duality and control routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("path became non-finite or exceeded the blow-up threshold at step {step}")]
    NonFinitePath { step: usize },
    #[error("priors do not share the same atom values")]
    SupportMismatch,
    #[error("all scores are equal; the worst case is the baseline mean")]
    DegenerateScores,
    #[error("estimated moment generating value {0} is not positive; enlarge the outer sample")]
    NonPositiveM(f64),
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("invalid search bracket [{lo}, {hi}]")]
    EmptyBracket { lo: f64, hi: f64 },
    #[error("Riccati solution exceeded the blow-up threshold at t = {t}")]
    RiccatiBlowup { t: f64 },
    #[error("information matrix is numerically singular")]
    SingularInformation,
    #[error("quadrature denominator underflowed")]
    QuadratureUnderflow,
    #[error("negative discriminant {0} in the closed-form coefficient system")]
    ComplexRoot(f64),
    #[error("closed-form coefficient p = {0} must be below 1")]
    InvalidP(f64),
    #[error("terminal wealth sample has zero variance")]
    ZeroVariance,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParameter(msg()))
    }
}
