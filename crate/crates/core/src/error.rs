use std::path::PathBuf;

/// Errors produced by the solvers, the EM engine and the file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("iteration did not converge: residual {residual:e} after {iterations} iterations")]
    NonConvergence { residual: f64, iterations: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("non-finite value encountered at step {step}: {what}")]
    NumericalFault { step: usize, what: String },

    #[error("instance too large for exhaustive enumeration: {0}")]
    InstanceTooLarge(String),

    #[error("too few points: {points} points for {k} clusters")]
    TooFewPoints { points: usize, k: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("value out of bounds: {0}")]
    Bounds(String),

    #[error("intention {k}: {source}")]
    Intention {
        k: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True if this error (or the error it wraps) is a solver non-convergence.
    pub fn is_non_convergence(&self) -> bool {
        match self {
            Error::NonConvergence { .. } => true,
            Error::Intention { source, .. } => source.is_non_convergence(),
            _ => false,
        }
    }

    pub(crate) fn for_intention(self, k: usize) -> Error {
        Error::Intention {
            k,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
