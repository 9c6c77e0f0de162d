use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Rotation angle too close to pi for a unique logarithm.
    #[error("rotation angle {angle} is within the near-pi exclusion zone; reparameterize")]
    AngleNearPi { angle: f64 },

    #[error("SO(3) Jacobian is singular at rotation magnitude {angle}")]
    SingularJacobian { angle: f64 },

    #[error("time step must be positive, got {0}")]
    NonPositiveDt(f64),

    #[error("{what} is not positive definite")]
    NotPositiveDefinite { what: &'static str },

    #[error("invalid degrees of freedom nu={nu} for dimension {dim} (need nu > dim - 1)")]
    InvalidDof { nu: f64, dim: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sparse Cholesky factorization failed at block {block}")]
    FactorizationFailure { block: usize },

    #[error("marginal covariance block ({0}, {1}) is not on the factorization pattern")]
    MarginalUnavailable(usize, usize),

    #[error("degenerate covariance update for {what}: smallest eigenvalue {min_eig:e}")]
    DegenerateUpdate { what: &'static str, min_eig: f64 },

    #[error("did not converge after {iterations} iterations")]
    DidNotConverge { iterations: usize },

    #[error("missing groundtruth for knot at t={0}")]
    MissingGroundtruth(f64),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}:{line}: quaternion norm {norm} is not within 1e-6 of one")]
    NonNormalizedQuaternion { path: PathBuf, line: u64, norm: f64 },

    #[error("problem is ill-posed: {0}")]
    IllPosed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
