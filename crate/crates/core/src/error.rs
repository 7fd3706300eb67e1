use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model dimensions: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset failed validation: {0}")]
    Validation(String),

    #[error("chain {chain} aborted during warmup: {reason}")]
    ChainAborted { chain: usize, reason: String },

    #[error("subject `{0}` is not present in the dataset")]
    UnknownSubject(String),

    #[error("criteria for models `{left}` and `{right}` cover different observation counts ({left_n} vs {right_n})")]
    MismatchedObservations {
        left: String,
        right: String,
        left_n: usize,
        right_n: usize,
    },

    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: PathBuf, column: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps a CSV error, surfacing plain I/O failures as [`Error::Io`].
    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        if source.is_io_error() {
            if let csv::ErrorKind::Io(e) = source.into_kind() {
                return Error::io(path, e);
            }
            unreachable!("is_io_error implies an Io kind");
        }
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}
