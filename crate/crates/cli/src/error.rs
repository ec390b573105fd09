use ntps_core::NtpsError;
use thiserror::Error;

use crate::format::FormatError;

/// Every failure maps onto one of the stable exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    /// Exit code 1.
    #[error("usage error: {0}")]
    Usage(String),
    /// Exit code 2.
    #[error("data error: {0}")]
    Data(String),
    /// Exit code 3.
    #[error("validation failed: {0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Validation(_) => 3,
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NtpsError> for CliError {
    fn from(e: NtpsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
