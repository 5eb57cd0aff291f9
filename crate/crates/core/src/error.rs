use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-domain input (bad box, dimension mismatch, ...).
    #[error("invalid input: {0}")]
    Input(String),
    /// Inconsistent configuration or degenerate training data.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A non-finite value or an out-of-range probability appeared.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Unknown word, category or predicate name.
    #[error("unknown label `{0}`")]
    Lookup(String),
    /// A reference into a table or tensor that does not exist.
    #[error("index out of range: {0}")]
    Index(String),
    #[error("{}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.to_string(),
        }
    }
}
