use thiserror::Error;

/// Errors raised across the positioning toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration document could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// A scenario, schedule or plan violates one of its rules.
    #[error("{0}")]
    Validation(String),

    /// A numerical routine failed (singular matrix, non-convergence, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
