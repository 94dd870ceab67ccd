use std::fmt;

use thiserror::Error;

/// Every failure the library can report.
///
/// `code()` gives the short machine-parsable prefix the CLI prints in front of
/// the message.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("input: {0}")]
    Input(String),

    #[error("numeric: {what} became non-finite at iteration {iteration}")]
    Numeric { what: String, iteration: usize },

    #[error("format: {msg} (byte offset {offset})")]
    Format { msg: String, offset: u64 },

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn code(&self) -> ErrorCode {
        match self {
            Error::Dimension { .. } => ErrorCode::Dimension,
            Error::Config(_) => ErrorCode::Config,
            Error::Usage(_) => ErrorCode::Usage,
            Error::Input(_) => ErrorCode::Input,
            Error::Numeric { .. } => ErrorCode::Numeric,
            Error::Format { .. } => ErrorCode::Format,
            Error::Io { .. } => ErrorCode::Io,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(msg: impl Into<String>, offset: u64) -> Self {
        Error::Format {
            msg: msg.into(),
            offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Dimension,
    Config,
    Usage,
    Input,
    Numeric,
    Format,
    Io,
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCode::Dimension => "E_DIM",
            ErrorCode::Config => "E_CONFIG",
            ErrorCode::Usage => "E_USAGE",
            ErrorCode::Input => "E_INPUT",
            ErrorCode::Numeric => "E_NUMERIC",
            ErrorCode::Format => "E_FORMAT",
            ErrorCode::Io => "E_IO",
        };
        f.write_str(s)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
