use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular geometry: condition number {condition:.3e} exceeds cap")]
    SingularGeometry { condition: f64 },

    #[error("invalid point: {0}")]
    InvalidPoint(String),

    #[error("degenerate frame: {0}")]
    DegenerateFrame(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("integration failed at step {step}: {source}")]
    Integration {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("observation {index}: {source}")]
    Observation {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("bad initialization: {0}")]
    BadInitialization(String),

    #[error("ill-conditioned Laplace approximation: {floored} of {total} Hessian eigenvalues floored")]
    IllConditionedLaplace { floored: usize, total: usize },

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("{failed} of {total} replicates failed")]
    ReplicateFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Integration {
            step,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_observation(self, index: usize) -> Self {
        Error::Observation {
            index,
            source: Box::new(self),
        }
    }
}
