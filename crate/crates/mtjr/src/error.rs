use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Process exit status for each class of failure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Config = 2,
    Numeric = 3,
    Io = 4,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] mtjr_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: corrupt file: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("{path}: format version {found} is not supported (expected {expected})")]
    VersionMismatch { path: PathBuf, found: u16, expected: u16 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
        move |source| Error::Io { path: path.to_owned(), source }
    }

    pub(crate) fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
        Error::CorruptFile { path: path.to_owned(), reason: reason.into() }
    }

    pub fn exit_code(&self) -> ExitCode {
        use mtjr_core::Error as E;
        match self {
            Error::Core(E::NonFinite(_) | E::NotScalar(_)) => ExitCode::Numeric,
            Error::Core(_) | Error::Config(_) => ExitCode::Config,
            Error::Io { .. } | Error::CorruptFile { .. } | Error::VersionMismatch { .. } | Error::Csv { .. } => {
                ExitCode::Io
            }
        }
    }
}
