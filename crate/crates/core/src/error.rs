use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    /// Dataset invariant violations, one entry per offending subject/event.
    #[error("invalid dataset:\n  {}", .0.join("\n  "))]
    InvalidDataset(Vec<String>),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage mismatch: expected {expected} dataset, found {found}")]
    StageMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("missing profile for subject {0}")]
    MissingProfile(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("subject {0} from the unseen partition reached the training set")]
    Leakage(String),

    #[error("{0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by bad input or configuration rather than by a
    /// failure while doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::InvalidDataset(_)
                | Error::EmptyDataset
                | Error::Config(_)
                | Error::StageMismatch { .. }
                | Error::MissingProfile(_)
                | Error::Shape(_)
                | Error::Empty(_)
        )
    }
}
