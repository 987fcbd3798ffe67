use alloc::string::String;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("interpolation time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("singular interpolant coefficient at s = {0}")]
    SingularCoefficient(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("trajectory {index} has {len} states, need at least {needed}")]
    TrajectoryTooShort { index: usize, len: usize, needed: usize },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite training loss at epoch {epoch} (last finite loss {last_finite})")]
    NonFiniteLoss { epoch: usize, last_finite: f64 },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn ensure_finite(values: &[f64], context: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}

pub(crate) fn ensure_len(len: usize, expected: usize, context: &'static str) -> Result<()> {
    if len == expected {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual: len,
        })
    }
}
