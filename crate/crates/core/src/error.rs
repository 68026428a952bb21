use std::path::PathBuf;

use thiserror::Error;

use crate::polytope::Polytope;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("state matrix is not Schur stable (spectral radius {0:.12})")]
    NotSchur(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("linear program is infeasible")]
    Infeasible,

    #[error("linear program is unbounded along {direction:?}")]
    Unbounded { direction: Vec<f64> },

    #[error("finite determination not reached within {t_max} horizons (max violation {max_violation:.3e})")]
    FiniteDetermination {
        t_max: usize,
        max_violation: f64,
        partial: Box<Polytope>,
    },

    #[error("could not find an interior point to sample from")]
    Sampling,

    #[error("pull-in center is not strictly inside the polytope (margin {0:.3e})")]
    NotInterior(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("set is empty")]
    EmptySet,

    #[error("no feasible initial command exists at the initial state")]
    StartupInfeasible,

    #[error("non-finite state at step {0}")]
    NonFinite(usize),

    #[error("containment could not be certified down to pull-in factor {0}")]
    Containment(f64),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            actual,
        }
    }

    /// Usage errors map to exit code 2 in the CLI, everything else to 1.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. } | Error::InvalidConfig(_) | Error::Parse { .. } | Error::Json(_)
        )
    }
}
