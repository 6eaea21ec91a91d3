use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range input data.
    #[error("input error: {0}")]
    Input(String),

    /// Invalid parameter or configuration value.
    #[error("parameter error: {0}")]
    Param(String),

    #[error("degenerate graph: {0}")]
    DegenerateGraph(String),

    #[error("degenerate channel: {0}")]
    DegenerateChannel(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    /// Non-finite values produced while training or evaluating.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Artifacts that do not belong together (schema/version mismatch).
    #[error("compatibility error: {0}")]
    Compat(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2 input error, 3 numeric failure, 4 compatibility error, 64 usage.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_)
            | Error::Io { .. }
            | Error::Parse { .. }
            | Error::DegenerateGraph(_)
            | Error::DegenerateChannel(_)
            | Error::EmptyMask(_)
            | Error::Shape(_) => 2,
            Error::Numeric(_) | Error::Tensor(_) => 3,
            Error::Compat(_) => 4,
            Error::Param(_) => 64,
        }
    }
}
