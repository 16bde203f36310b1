//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by flow evaluation, training, reconstruction and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A structural precondition was violated (dimensions, sizes, config).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced a non-finite value. Non-finite intermediates
    /// are never propagated silently.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// The iterative Poisson solve did not reach its target residual.
    #[error("conjugate gradient did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    SolverDiverged { residual: f64, iterations: usize },

    /// A reconstruction stage failed; the stage name is preserved so
    /// pipeline errors can be attributed.
    #[error("stage '{stage}': {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// File-format problems, with a line number where one makes sense.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Wraps an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
