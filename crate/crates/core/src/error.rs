use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on the arguments was violated.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// Non-finite input or an unrepresentable intermediate.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An internal contract was broken; indicates a bug.
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// A persisted artifact is malformed.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! arg_err {
    ($($t:tt)*) => {
        $crate::error::Error::Argument(format!($($t)*))
    };
}
pub(crate) use arg_err;
