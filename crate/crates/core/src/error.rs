use thiserror::Error;

/// Errors raised by the mapping pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("architecture mismatch between fields")]
    ArchMismatch,

    #[error(transparent)]
    Protocol(#[from] ProtocolError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

/// Wire-format decoding failures.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    Version(u16),

    #[error("truncated buffer: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },

    #[error("unknown message kind {0}")]
    Kind(u8),

    #[error("malformed payload: {0}")]
    Malformed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
