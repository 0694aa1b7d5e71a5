use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("coverage error: pixel ({row}, {col}) is not covered by any tile")]
    Coverage { row: usize, col: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("record on line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Parameter(_)
            | Error::Dimension(_)
            | Error::Format(_)
            | Error::Coverage { .. }
            | Error::Usage(_) => 2,
            Error::Dependency(_) => 3,
            Error::Record { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
