use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed values that violate an operation's preconditions.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Input data is unusable (non-finite entries, duplicates, too few rows).
    #[error("invalid data: {0}")]
    Data(String),

    /// Experiment or solver configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// On-disk artifact does not match the expected layout.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("linear solve failed at step {step}: {msg}")]
    Solver { step: usize, msg: String },

    #[error("integration blew up at step {step} (t = {t})")]
    BlowUp { step: usize, t: f64 },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    /// Failure with context attached by an outer stage.
    #[error("{context}: {source}")]
    Stage {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Stage {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error once `Stage` wrappers are peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for caller or configuration mistakes, false for numerical failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self.root(),
            Error::Argument(_) | Error::Config(_) | Error::Format { .. } | Error::Io { .. } | Error::Json { .. }
        )
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl Into<String>) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl Into<String>) -> Result<T> {
        self.map_err(|e| e.context(context))
    }
}
