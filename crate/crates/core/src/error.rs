use thiserror::Error;

/// Errors raised by the core sampling and oracle routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("vocabulary must contain at least 2 tokens, got {0}")]
    VocabTooSmall(u32),
    #[error("sequence is empty")]
    EmptySequence,
    #[error("token {id} at position {position} is outside the vocabulary")]
    TokenOutOfRange { position: usize, id: u32 },
    #[error("position {position} is out of range for length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("position {0} is not masked in this view")]
    PositionNotMasked(usize),
    #[error("view has no masked positions")]
    NothingMasked,
    #[error("sequence length {len} exceeds the model maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("scorer failure: {0}")]
    Scorer(String),
    #[error("state space too large: {size} exceeds cap {cap}")]
    StateSpaceTooLarge { size: u128, cap: u128 },
    #[error("temperature must be positive and finite, got {0}")]
    NonPositiveTemperature(f64),
    #[error("nucleus boundary must lie in (0, 1], got {0}")]
    InvalidBoundary(f64),
    #[error("power iteration did not converge after {iterations} iterations (last change {delta:e})")]
    NoConvergence { iterations: usize, delta: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch: kernel has {kernel} states, target has {target}")]
    ShapeMismatch { kernel: usize, target: usize },
    #[error("invalid conditional table: {0}")]
    InvalidTable(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("malformed model file: {0}")]
    ModelFormat(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
