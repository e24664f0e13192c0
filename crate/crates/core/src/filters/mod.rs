//! Recursive variational Gaussian filters with factor-analysis precision.

mod linear;
mod logistic;
mod nonlinear;

pub use linear::{kalman_step_dense, lrvga_linear_step};
pub use logistic::{
    lrvga_logistic_step, probit_scale, sigmoid, sigmoid_prime, solve_glm_scalar_system,
    solve_glm_scalars, GlmScalarSolution, PROBIT_BETA,
};
pub use nonlinear::{
    expectation_by_sampling, ggn_block, lrvga_nonlinear_step, LinearGaussianModel,
    LogisticModel, NonlinearConfig, NonlinearModel, Scheme,
};

use nalgebra::DVector;
use rand::Rng;

use crate::error::{check_dim, check_finite, LrvgaError, Result};
use crate::fa::{init_isotropic_prior, FaPrecision};

/// Mean plus factor-analysis precision: `N(μ, (W Wᵀ + Ψ)⁻¹)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mu: DVector<f64>,
    pub prec: FaPrecision,
}

impl GaussianBelief {
    pub fn new(mu: DVector<f64>, prec: FaPrecision) -> Result<Self> {
        check_dim(prec.dim(), mu.len())?;
        check_finite(mu.iter(), "belief mean")?;
        Ok(Self { mu, prec })
    }

    /// Zero-mean prior `N(0, σ₀² I)` with a rank-`p` factor initialization.
    pub fn isotropic_prior<R: Rng + ?Sized>(
        d: usize,
        p: usize,
        sigma0: f64,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let prec = init_isotropic_prior(d, p, sigma0, eps, rng)?;
        Ok(Self {
            mu: DVector::zeros(d),
            prec,
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Mean norm beyond which a run is declared divergent.
pub const MAX_MEAN_NORM: f64 = 1e8;
/// Fraction of floored diagonal entries beyond which a run is declared divergent.
pub const MAX_FLOORED_FRACTION: f64 = 0.1;

pub(crate) fn check_divergence(belief: &GaussianBelief, clamped: usize) -> Result<()> {
    let norm = belief.mu.norm();
    if !norm.is_finite() || norm > MAX_MEAN_NORM {
        return Err(LrvgaError::Divergence(format!("mean norm reached {norm:e}")));
    }
    let d = belief.dim();
    if clamped as f64 > MAX_FLOORED_FRACTION * d as f64 {
        return Err(LrvgaError::Divergence(format!(
            "{clamped} of {d} diagonal entries hit the floor"
        )));
    }
    Ok(())
}
