use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes, channel counts or parameter ranges that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input outside an operation's domain (empty sets, degenerate boxes, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// NaN or infinity showed up in a value or gradient.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Scene generation could not place boxes within the retry budget.
    #[error("generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },

    /// Training produced a non-finite loss.
    #[error("training diverged (seed {seed}, step {step}): {reason}")]
    Training { seed: u64, step: usize, reason: String },

    /// Reflective refinement produced a non-finite objective.
    #[error("refinement diverged at step {step}: {reason}")]
    Refinement { step: usize, reason: String },

    /// Malformed persisted data.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// Exit-code class used by the CLI: 2 for numerical failures, 1 otherwise.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_) | Error::Training { .. } | Error::Refinement { .. }
        )
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! domain_err {
    ($($arg:tt)*) => { $crate::error::Error::Domain(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use domain_err;
