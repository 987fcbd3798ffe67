use std::path::Path;

use flowdas_core::Error as CoreError;

/// Pipeline failure, classified by the process exit code it maps to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::InvalidConfig(_) => CliError::Config(msg),
            CoreError::NonFinite(_) | CoreError::NonFiniteLoss { .. } | CoreError::SingularCoefficient(_) => {
                CliError::Numerical(msg)
            }
            CoreError::DimensionMismatch { .. }
            | CoreError::TimeOutOfRange(_)
            | CoreError::TrajectoryTooShort { .. }
            | CoreError::Format(_)
            | CoreError::ShapeMismatch(_)
            | CoreError::Empty(_) => CliError::Data(msg),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
