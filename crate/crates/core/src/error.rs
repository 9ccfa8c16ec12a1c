use thiserror::Error;

#[derive(Debug, Error)]
pub enum FsdaError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("singular pivot at index {index} (|pivot| = {value:e})")]
    SingularPivot { index: usize, value: f64 },

    #[error("singular {what} matrix of order {size}")]
    SingularKernel { what: &'static str, size: usize },

    #[error("duplicate column mismatch at column {column}: deviation {deviation:e} exceeds {tolerance:e}")]
    MergeMismatch {
        column: usize,
        deviation: f64,
        tolerance: f64,
    },

    #[error("breakdown at iteration {k}: {source}")]
    Breakdown {
        k: usize,
        #[source]
        source: Box<FsdaError>,
    },

    #[error("dense oracle is limited to n <= {limit}, got n = {n}")]
    TooLarge { n: usize, limit: usize },

    #[error("dense iteration did not converge within {iterations} steps (last change {change:e})")]
    NotConverged { iterations: usize, change: f64 },

    #[error("{file}:{location}: {msg}")]
    Parse {
        file: String,
        location: String,
        msg: String,
    },

    #[error("instance generation failed after {attempts} attempts: {diagnostics}")]
    Generation { attempts: usize, diagnostics: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FsdaError {
    pub(crate) fn at_iteration(self, k: usize) -> FsdaError {
        match self {
            e @ FsdaError::Breakdown { .. } => e,
            e => FsdaError::Breakdown {
                k,
                source: Box::new(e),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, FsdaError>;
