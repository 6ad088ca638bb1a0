use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("index {index} out of range (size {size})")]
    Index { index: usize, size: usize },

    #[error("forward solve failed at time step {step}: residual {residual:e} after {iterations} Newton iterations")]
    ForwardStep {
        step: usize,
        iterations: usize,
        residual: f64,
    },

    #[error("Newton did not converge in {iterations} iterations (last residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("basis deficiency: requested {requested} modes but only {retainable} are retainable")]
    BasisDeficiency { requested: usize, retainable: usize },

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("missing artifact {0}; run the `offline` stage first")]
    MissingArtifact(PathBuf),

    #[error("malformed artifact {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
