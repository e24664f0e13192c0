use nalgebra::DMatrix;

use super::{check_divergence, GaussianBelief};
use crate::dense::DenseGaussian;
use crate::error::{check_dim, LrvgaError, Result};
use crate::fa::{recursive_em_update, RecursionWeights};
use crate::linalg::symmetrize;
use crate::observation::Observation;

/// Exact Kalman update of a static parameter under `y = xᵀθ + N(0, 1)`:
/// `P_t⁻¹ = P_{t-1}⁻¹ + x xᵀ`, `μ_t = μ_{t-1} + P_t x (y − xᵀ μ_{t-1})`.
pub fn kalman_step_dense(belief: &DenseGaussian, obs: &Observation) -> Result<DenseGaussian> {
    check_dim(belief.dim(), obs.dim())?;
    let y = obs.label()?;
    let x = obs.x.to_dense();
    let px = &belief.cov * &x;
    let denom = 1.0 + x.dot(&px);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(LrvgaError::NotPositiveDefinite("updated precision"));
    }
    // Sherman-Morrison: P_t = P − (Px)(Px)ᵀ / (1 + xᵀPx), so P_t x = Px / (1 + xᵀPx).
    let mut cov: DMatrix<f64> = belief.cov.clone();
    cov.ger(-1.0 / denom, &px, &px, 1.0);
    symmetrize(&mut cov);
    let innovation = y - x.dot(&belief.mean);
    let mean = &belief.mean + px * (innovation / denom);
    Ok(DenseGaussian { mean, cov })
}

/// Limited-memory linear-Gaussian update: the precision absorbs `x xᵀ` through
/// the recursive EM, and the mean is corrected with the new precision through
/// the Woodbury identity.
pub fn lrvga_linear_step(
    belief: &GaussianBelief,
    obs: &Observation,
    inner_loops: usize,
) -> Result<GaussianBelief> {
    check_dim(belief.dim(), obs.dim())?;
    let y = obs.label()?;
    if obs.x.is_zero() {
        return Ok(belief.clone());
    }
    let block = obs.x.scaled_column(1.0);
    let outcome = recursive_em_update(
        &belief.prec,
        &block,
        RecursionWeights::accumulate(),
        inner_loops,
    )?;
    let innovation = y - obs.x.dot(&belief.mu);
    let gain = outcome.fa.woodbury_apply(&obs.x.to_dense())?;
    let next = GaussianBelief {
        mu: &belief.mu + gain * innovation,
        prec: outcome.fa,
    };
    check_divergence(&next, outcome.clamped)?;
    Ok(next)
}
