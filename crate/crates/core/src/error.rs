use thiserror::Error;

/// Errors raised across the laboratory.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum VpyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric failure: {what} (achieved error estimate {estimate:e})")]
    NumericFailure { what: String, estimate: f64 },

    #[error("range exceeded: target {target:e} is beyond the value {ceiling_value:e} reached at the bracket ceiling {ceiling:e}")]
    RangeExceeded {
        target: f64,
        ceiling: f64,
        ceiling_value: f64,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("kernel singularity at t = {t}: {detail}")]
    Singularity { t: f64, detail: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("property violation: {0}")]
    PropertyViolation(String),

    #[error("problem size {size} exceeds the cap {cap}; use the coupled bound instead")]
    SizeCap { size: usize, cap: usize },

    #[error("sampler failure: {0}")]
    Sampler(String),

    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for VpyError {
    fn from(e: std::io::Error) -> Self {
        VpyError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, VpyError>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(VpyError::InvalidInput(msg.into()))
}
