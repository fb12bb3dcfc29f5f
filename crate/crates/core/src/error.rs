use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),

    #[error("config: {0}")]
    Config(String),

    #[error("conditioning on a null event: {0}")]
    NullEvent(String),

    #[error("positivity violation at x={x}, c={c}: P(X=x, M=f(x,c)) = 0")]
    Positivity { x: usize, c: usize },

    #[error("unsupported model: {0}")]
    Unsupported(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("placement: {0}")]
    Placement(String),

    #[error("training: {0}")]
    Training(String),

    #[error("evaluation: {0}")]
    Eval(String),

    #[error("verification failed: {0}")]
    Verify(String),

    #[error("run directory {0} is locked by another writer")]
    Locked(PathBuf),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable code used by the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Validation(_) => "E_VALIDATION",
            Error::Config(_) => "E_CONFIG",
            Error::NullEvent(_) => "E_NULL_EVENT",
            Error::Positivity { .. } => "E_POSITIVITY",
            Error::Unsupported(_) => "E_UNSUPPORTED",
            Error::Shape(_) => "E_SHAPE",
            Error::Placement(_) => "E_PLACEMENT",
            Error::Training(_) => "E_TRAINING",
            Error::Eval(_) => "E_EVAL",
            Error::Verify(_) => "E_VERIFY",
            Error::Locked(_) => "E_LOCKED",
            Error::NotFound(_) => "E_NOT_FOUND",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Image { .. } => "E_IMAGE",
        }
    }

    /// True for errors caused by bad user input rather than a failing run.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Validation(_) | Error::Config(_) | Error::Json(_) | Error::Unsupported(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
