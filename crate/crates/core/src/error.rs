use thiserror::Error;

/// Errors raised across the pipeline.
///
/// [`Error::Numerical`] marks failures of a numerical procedure on valid
/// inputs (NaN losses, non-convergence); everything else is input or format
/// validation. The CLI maps the former to exit code 3 and the rest to 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid tensor: {0}")]
    InvalidTensor(&'static str),

    #[error("degenerate correlation")]
    DegenerateCorrelation,

    #[error("insufficient repetitions for b = {b} s/mm2: need {needed}, have {available}")]
    InsufficientRepetitions {
        b: f64,
        needed: usize,
        available: usize,
    },

    #[error("zero-variance channel {0}")]
    ZeroVarianceChannel(usize),

    #[error("empty mask")]
    EmptyMask,

    #[error("degenerate")]
    DegenerateSample,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("{0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("container format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
