use std::path::PathBuf;

/// Errors produced anywhere in the captioning pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid UTF-8: {0}")]
    Utf8(#[from] std::str::Utf8Error),

    #[error("{path}:{line}: {message}")]
    LineFormat {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate image id `{0}`")]
    DuplicateId(String),

    #[error("no embedding for image id `{0}`")]
    MissingEmbedding(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    IdOutOfRange { id: usize, vocab_size: usize },

    #[error("malformed {format} file: {message}")]
    Format {
        format: &'static str,
        message: String,
    },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(format: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            format,
            message: message.into(),
        }
    }
}
