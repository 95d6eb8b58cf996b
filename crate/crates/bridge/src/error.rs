use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BridgeError {
    #[error("cannot connect to {endpoint}: {reason}")]
    Connect { endpoint: String, reason: String },
    #[error("server speaks protocol version {server}, client speaks {client}")]
    VersionMismatch { server: u32, client: u32 },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("cannot encode message: {0}")]
    Encode(String),
    #[error("server error: {0}")]
    Server(String),
    #[error("no response within {0:?}")]
    Timeout(std::time::Duration),
    #[error("connection closed by server")]
    Closed,
    #[error("i/o error: {0}")]
    Io(String),
    #[error("request rejected locally: {0}")]
    Request(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<BridgeError> },
}

impl BridgeError {
    /// Failures worth reconnecting and retrying for.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            BridgeError::Connect { .. } | BridgeError::Timeout(_) | BridgeError::Closed | BridgeError::Io(_)
        )
    }
}

impl From<std::io::Error> for BridgeError {
    fn from(e: std::io::Error) -> Self {
        BridgeError::Io(e.to_string())
    }
}

impl From<BridgeError> for seqmc_core::Error {
    fn from(e: BridgeError) -> Self {
        seqmc_core::Error::Scorer(e.to_string())
    }
}
