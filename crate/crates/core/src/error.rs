use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad arguments, incompatible grids, or an invalid configuration.
    #[error("usage error: {0}")]
    Usage(String),

    /// A coefficient returned a non-finite value.
    #[error("model `{model}` produced a non-finite {what} at x = {x:?}, y = {y:?}")]
    ModelEvaluation {
        model: String,
        what: &'static str,
        x: Vec<f64>,
        y: Vec<f64>,
    },

    /// The implicit drift equation could not be solved at step `step`.
    #[error("implicit solve failed at step {step}: residual {residual:e} after {iterations} iterations")]
    StepFailure {
        step: usize,
        residual: f64,
        iterations: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    /// True for failures caused by the numerics rather than by the input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::ModelEvaluation { .. } | Error::StepFailure { .. })
    }
}
