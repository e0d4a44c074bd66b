use thiserror::Error;

/// Errors raised by the motion diffusion library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("undefined loss: {0}")]
    UndefinedLoss(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported version: {0}")]
    Version(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable one-word category, used by the CLI for machine-parsable errors.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Range(_) => "range",
            Error::Input(_) => "input",
            Error::Precondition(_) => "precondition",
            Error::UndefinedLoss(_) => "undefined-loss",
            Error::NonFinite(_) => "non-finite",
            Error::Format(_) | Error::Json(_) => "format",
            Error::Version(_) => "version",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
