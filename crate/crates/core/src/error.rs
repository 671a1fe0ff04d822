use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error categories surfaced by the library and mapped to CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {} at record {record}: {message}", path.display())]
    Parse {
        path: PathBuf,
        record: usize,
        message: String,
    },

    #[error("unsupported format version {found} in {} (expected {expected})", path.display())]
    Version {
        path: PathBuf,
        found: u64,
        expected: u64,
    },

    #[error("invalid environment spec: {0}")]
    Spec(String),

    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Spec(_) => 2,
            Error::Io { .. } | Error::Parse { .. } | Error::Version { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }
}
