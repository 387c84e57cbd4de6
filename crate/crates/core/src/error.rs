use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sigma rule dimension must be at least 1")]
    ZeroDimension,

    #[error("Gauss-Hermite rule of dimension {0} exceeds the supported maximum of {max}", max = crate::quadrature::GH3_MAX_DIMENSION)]
    DimensionTooLarge(usize),

    #[error("unknown sigma rule family `{0}` (expected ut3, ut5 or gh3)")]
    UnknownRule(String),

    #[error("{what}: dimension mismatch, expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{what} is not positive definite after jitter escalation")]
    NotPositiveDefinite { what: &'static str },

    #[error("non-finite state at time step {t} (dynamics blow-up)")]
    Blowup { t: usize },

    #[error("{what} at time step {t} is not positive definite")]
    NotPositiveDefiniteAt { what: &'static str, t: usize },

    #[error("regularization exhausted at time step {t}: Q_uu + mu*I not positive definite for mu up to {mu:e}")]
    RegularizationExhausted { t: usize, mu: f64 },

    #[error("iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        match self {
            e @ Error::Iteration { .. } => e,
            e => Error::Iteration {
                iteration,
                source: Box::new(e),
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
