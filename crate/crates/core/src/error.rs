use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("vocabulary error: token id {id} is outside a vocabulary of {vocab_size}")]
    Vocabulary { id: usize, vocab_size: usize },
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("no memory savings at density {density}: SpaRTA only saves memory when k < 0.5")]
    NoSavings { density: f64 },
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Coarse grouping used for process exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Runtime,
    Data,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::NoSavings { .. } => ErrorCategory::Usage,
            Error::Vocabulary { .. }
            | Error::Input(_)
            | Error::Encoding(_)
            | Error::Format(_)
            | Error::Pairing(_) => ErrorCategory::Data,
            _ => ErrorCategory::Runtime,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}
