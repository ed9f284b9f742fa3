use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An iterative routine failed to reach its tolerance or hit a
    /// numerically meaningless state (NaN, negative norm, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Exhaustive searches refuse instances that would not finish.
    #[error("instance too large: {0}")]
    TooLarge(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
