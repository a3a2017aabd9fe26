use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A non-finite value reached a kernel.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("no attendable key rows: every key is masked")]
    NoAttendable,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("capacity exceeded: {count} tokens for a limit of {limit} ({} over)", count - limit)]
    Capacity { count: usize, limit: usize },

    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("stale {what}: expected digest {expected}, found {found}")]
    Stale {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("empty prompt: {0}")]
    EmptyPrompt(String),

    #[error("client error: {0}")]
    Client(#[from] crate::prompt::client::ClientError),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
