use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value violates its documented invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input file could not be parsed. `line` is 1-based and counts the header.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    /// Parsed data is well-formed but semantically invalid.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("layout error: {0}")]
    Layout(String),

    /// A latency query referenced a configuration that was never profiled.
    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// The scenario cannot be admitted (e.g. KV occupancy above the token budget).
    #[error("scenario error: {0}")]
    Scenario(String),

    /// An internal consistency check failed. Always a bug.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the scenario description rather than by I/O or bugs.
    pub fn is_scenario_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Validation(_) | Error::Scenario(_) | Error::Layout(_)
        )
    }
}
