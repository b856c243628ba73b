use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// The CLI maps [`Error::Config`], [`Error::Parameter`], [`Error::Shape`],
/// [`Error::Format`] and [`Error::Io`] to exit code 1 and
/// [`Error::Numerical`] / [`Error::Training`] to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("numerical error at step {step}: {msg}")]
    Numerical { step: usize, msg: String },
    #[error("training diverged at step {step}: loss = {loss}")]
    Training { step: usize, loss: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("singularity: {0}")]
    Singularity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for failures the CLI reports with exit code 2.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. } | Error::Training { .. } | Error::Singularity(_)
        )
    }
}
