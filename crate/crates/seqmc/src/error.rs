use thiserror::Error;

use seqmc_bridge::BridgeError;

/// Failures of a command, each tied to a process exit code.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("scorer failure: {0}")]
    Scorer(String),
    #[error("oracle tolerance violated: {0}")]
    OracleViolation(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl AppError {
    pub fn exit_code(&self) -> u8 {
        match self {
            AppError::Io(_) => 1,
            AppError::Config(_) => 2,
            AppError::Scorer(_) => 3,
            AppError::OracleViolation(_) => 4,
        }
    }
}

impl From<seqmc_core::Error> for AppError {
    fn from(e: seqmc_core::Error) -> Self {
        use seqmc_core::Error as E;
        match e {
            E::Scorer(m) => AppError::Scorer(m),
            E::Io(m) => AppError::Io(m),
            other => AppError::Config(other.to_string()),
        }
    }
}

impl From<BridgeError> for AppError {
    fn from(e: BridgeError) -> Self {
        match e {
            BridgeError::Request(m) => AppError::Config(m),
            other => AppError::Scorer(other.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

pub type Result<T, E = AppError> = std::result::Result<T, E>;
