use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A data file does not follow its documented layout.
    #[error("{file}: {message}")]
    Format { file: String, message: String },

    /// Invalid run configuration or inconsistent call arguments.
    #[error("configuration error: {0}")]
    Config(String),

    /// A manifest or merge would violate a uniqueness constraint.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A value is outside the domain of a formula (empty matrix, zero class count, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Caller broke an operation's precondition (shape, range, label).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Checkpoint contents do not fit the model.
    #[error("load error: {0}")]
    Load(String),

    #[error("cannot decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },

    /// Numerical failure inside the optimizer.
    #[error("training error: {0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(file: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the `fer` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Decode { .. } => 3,
            Error::Contract(_) => 4,
            Error::Format { .. } | Error::Integrity(_) | Error::Domain(_) => 5,
            Error::Load(_) => 6,
            Error::Training(_) => 7,
        }
    }
}

/// Attach a path to an `std::io::Result`.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
