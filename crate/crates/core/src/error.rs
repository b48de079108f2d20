use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("gradient check failed at input {input} coordinate {coord}: analytic {analytic}, numeric {numeric}")]
    GradCheck {
        input: usize,
        coord: usize,
        analytic: f64,
        numeric: f64,
    },

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("non-finite value in record {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("cache was produced by a different checkpoint")]
    HashMismatch,

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
