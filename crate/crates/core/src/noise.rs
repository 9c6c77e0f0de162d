use nalgebra::Matrix6;

use crate::error::{Error, Result};

/// Dimension of the pose-error covariances that carry an Inverse-Wishart prior.
pub const IW_DIM: usize = 6;

/// Every learnable and fixed noise quantity of a problem.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseParameters {
    /// Power-spectral density of the white-noise-on-acceleration prior.
    pub qc: Matrix6<f64>,
    /// Static covariance of pose measurements.
    pub w: Option<Matrix6<f64>>,
    /// Static covariance of groundtruth pose factors.
    pub w_gt: Option<Matrix6<f64>>,
    /// Static covariance of odometry edges in pose graphs.
    pub w_odo: Option<Matrix6<f64>>,
    /// Inverse-Wishart scale matrix, kept at `det(psi) = beta`.
    pub psi: Matrix6<f64>,
    pub nu: f64,
    pub beta: f64,
    /// One covariance per IW-bound factor.
    pub upsilons: Vec<Matrix6<f64>>,
}

impl NoiseParameters {
    /// Default starting point: identity covariances, `psi = beta^(1/d) I` and
    /// every `upsilon` at the IW mode `psi / (alpha - 1)`.
    pub fn initial(num_upsilons: usize, nu: f64, beta: f64) -> Result<Self> {
        check_metaparameters(nu, beta)?;
        let psi = Matrix6::identity() * beta.powf(1.0 / IW_DIM as f64);
        let alpha = nu + IW_DIM as f64 + 2.0;
        Ok(Self {
            qc: Matrix6::identity(),
            w: Some(Matrix6::identity()),
            w_gt: Some(Matrix6::identity()),
            w_odo: Some(Matrix6::identity()),
            psi,
            nu,
            beta,
            upsilons: vec![psi / (alpha - 1.0); num_upsilons],
        })
    }

    /// `alpha = nu + d + 2`.
    pub fn alpha(&self) -> f64 {
        self.nu + IW_DIM as f64 + 2.0
    }

    /// Resets every `upsilon` to the IW mode of the current `psi`.
    pub fn reset_upsilons(&mut self, count: usize) {
        let mode = self.psi / (self.alpha() - 1.0);
        self.upsilons = vec![mode; count];
    }
}

pub fn check_metaparameters(nu: f64, beta: f64) -> Result<()> {
    if !(nu > IW_DIM as f64 - 1.0) || !nu.is_finite() {
        return Err(Error::InvalidDof { nu, dim: IW_DIM });
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    Ok(())
}
