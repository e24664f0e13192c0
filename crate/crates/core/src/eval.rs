//! Divergences between Gaussians and batch baselines used to score the filters.

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;

use crate::dense::{fa_to_dense, DenseGaussian};
use crate::error::{check_dim, LrvgaError, Result};
use crate::filters::{sigmoid, sigmoid_prime, GaussianBelief};
use crate::linalg::{row_dot, symmetrize};
use crate::observation::Observation;
use crate::sampler::{draw_dense_reference, EnsembleSampler};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Borrowed view of a Gaussian in either representation.
#[derive(Debug, Clone, Copy)]
pub enum GaussianRef<'a> {
    Fa(&'a GaussianBelief),
    Dense(&'a DenseGaussian),
}

impl<'a> From<&'a GaussianBelief> for GaussianRef<'a> {
    fn from(g: &'a GaussianBelief) -> Self {
        Self::Fa(g)
    }
}

impl<'a> From<&'a DenseGaussian> for GaussianRef<'a> {
    fn from(g: &'a DenseGaussian) -> Self {
        Self::Dense(g)
    }
}

impl GaussianRef<'_> {
    fn mean(&self) -> &DVector<f64> {
        match self {
            Self::Fa(g) => &g.mu,
            Self::Dense(g) => &g.mean,
        }
    }

    fn log_det_cov(&self) -> Result<f64> {
        match self {
            Self::Fa(g) => Ok(-g.prec.log_det()?),
            Self::Dense(g) => g.log_det_cov(),
        }
    }
}

/// `KL(q ‖ target)` between two Gaussians.
///
/// When both operands carry a factor-analysis precision the trace term is
/// assembled from `p×p` and `d×p` products only.
pub fn gaussian_kl<'a, 'b>(
    q: impl Into<GaussianRef<'a>>,
    target: impl Into<GaussianRef<'b>>,
) -> Result<f64> {
    let q = q.into();
    let target = target.into();
    let d = q.mean().len();
    check_dim(d, target.mean().len())?;
    let delta = target.mean() - q.mean();

    let (trace, quad) = match (q, target) {
        (GaussianRef::Fa(qb), GaussianRef::Fa(tb)) => {
            // Σ_q = Ψ_q⁻¹ − L Aᵀ with A = Ψ_q⁻¹ W_q, L = A M⁻¹.
            let psi_q = qb.prec.psi();
            let (wt, psi_t) = (tb.prec.w(), tb.prec.psi());
            let a = qb.prec.scaled_loadings();
            let l = qb.prec.sampling_gain();
            let mut trace = psi_t.component_div(psi_q).sum();
            trace -= psi_t.dot(&row_dot(&l, &a));
            trace += wt.component_mul(wt).column_sum().component_div(psi_q).sum();
            let at_w = a.transpose() * wt;
            let lt_w = l.transpose() * wt;
            trace -= at_w.component_mul(&lt_w).sum();
            (trace, delta.dot(&tb.prec.apply(&delta)?))
        }
        (GaussianRef::Fa(qb), GaussianRef::Dense(tb)) => {
            let pt = tb.precision()?;
            let psi_q = qb.prec.psi();
            let a = qb.prec.scaled_loadings();
            let l = qb.prec.sampling_gain();
            let trace = pt.diagonal().component_div(psi_q).sum() - (&pt * l).component_mul(&a).sum();
            (trace, delta.dot(&(&pt * &delta)))
        }
        (GaussianRef::Dense(qb), GaussianRef::Fa(tb)) => {
            let (wt, psi_t) = (tb.prec.w(), tb.prec.psi());
            let trace = qb.cov.diagonal().dot(psi_t) + (&qb.cov * wt).component_mul(wt).sum();
            (trace, delta.dot(&tb.prec.apply(&delta)?))
        }
        (GaussianRef::Dense(qb), GaussianRef::Dense(tb)) => {
            let pt = tb.precision()?;
            (
                pt.component_mul(&qb.cov).sum(),
                delta.dot(&(&pt * &delta)),
            )
        }
    };
    let kl = 0.5 * (trace + quad - d as f64 + target.log_det_cov()? - q.log_det_cov()?);
    if !kl.is_finite() {
        return Err(LrvgaError::NonFinite("Gaussian KL"));
    }
    Ok(kl)
}

/// Monte Carlo divergence estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    /// Nats; shifted by the log normalizer of the target when `!normalized`.
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub normalized: bool,
}

/// `E_q[log q] = −½ log det Σ − (d/2)(1 + log 2π)`.
fn neg_entropy(d: usize, log_det_cov: f64) -> f64 {
    -0.5 * log_det_cov - 0.5 * d as f64 * (1.0 + LN_2PI)
}

/// Combines the closed-form negative entropy with log-target values at samples of `q`.
pub fn kl_from_log_target(
    q_neg_entropy: f64,
    log_target: &[f64],
    normalized: bool,
) -> Result<KlEstimate> {
    let k = log_target.len();
    if k < 2 {
        return Err(LrvgaError::InvalidParameter(
            "Monte Carlo KL needs at least two samples".into(),
        ));
    }
    if log_target.iter().any(|v| !v.is_finite()) {
        return Err(LrvgaError::NonFinite("log target at a sample"));
    }
    let mean = log_target.iter().sum::<f64>() / k as f64;
    let var = log_target.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    Ok(KlEstimate {
        value: q_neg_entropy - mean,
        std_error: (var / k as f64).sqrt(),
        n_samples: k,
        normalized,
    })
}

/// `E_q[log q − logpost]` with ensemble-sampler draws from `q`.
pub fn mc_kl_to_posterior<F, R>(
    q: &GaussianBelief,
    logpost: F,
    k: usize,
    rng: &mut R,
) -> Result<KlEstimate>
where
    F: Fn(DVectorView<'_, f64>) -> f64,
    R: Rng + ?Sized,
{
    let samples = EnsembleSampler::new(&q.prec, rng)?.draw(&q.mu, k.max(1))?;
    let values: Vec<f64> = samples.column_iter().map(|c| logpost(c)).collect();
    kl_from_log_target(neg_entropy(q.dim(), -q.prec.log_det()?), &values, false)
}

/// [`mc_kl_to_posterior`] for a dense Gaussian, drawing through its Cholesky factor.
pub fn mc_kl_dense_to_posterior<F, R>(
    q: &DenseGaussian,
    logpost: F,
    k: usize,
    rng: &mut R,
) -> Result<KlEstimate>
where
    F: Fn(DVectorView<'_, f64>) -> f64,
    R: Rng + ?Sized,
{
    let samples = draw_dense_reference(&q.mean, &q.cov, k.max(1), rng)?;
    let values: Vec<f64> = samples.column_iter().map(|c| logpost(c)).collect();
    kl_from_log_target(neg_entropy(q.dim(), q.log_det_cov()?), &values, false)
}

fn prior_log_density(theta: DVectorView<'_, f64>, sigma0: f64) -> f64 {
    let d = theta.len() as f64;
    let var = sigma0 * sigma0;
    -0.5 * theta.norm_squared() / var - 0.5 * d * (LN_2PI + var.ln())
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn features_dot(obs: &Observation, theta: DVectorView<'_, f64>) -> f64 {
    match &obs.x {
        crate::Features::Dense(v) => v.dot(&theta),
        crate::Features::Sparse(s) => s.iter().map(|(i, v)| v * theta[i]).sum(),
    }
}

/// `log N(θ; 0, σ₀² I) + Σᵢ log N(yᵢ; xᵢᵀθ, 1)`.
pub fn logposterior_linear(theta: DVectorView<'_, f64>, data: &[Observation], sigma0: f64) -> f64 {
    let mut total = prior_log_density(theta, sigma0);
    for obs in data {
        let r = obs.y.unwrap_or(f64::NAN) - features_dot(obs, theta);
        total -= 0.5 * (r * r + LN_2PI);
    }
    total
}

/// `log N(θ; 0, σ₀² I) + Σᵢ [yᵢ xᵢᵀθ − log(1 + exp(xᵢᵀθ))]`.
pub fn logposterior_logistic(
    theta: DVectorView<'_, f64>,
    data: &[Observation],
    sigma0: f64,
) -> f64 {
    let mut total = prior_log_density(theta, sigma0);
    for obs in data {
        let z = features_dot(obs, theta);
        total += obs.y.unwrap_or(f64::NAN) * z - softplus(z);
    }
    total
}

/// Laplace approximation of the logistic posterior under the prior `N(0, σ₀² I)`.
///
/// The MAP is found by Newton's method with backtracking; the returned
/// covariance is the inverse Hessian of the negative log posterior at the MAP.
pub fn laplace_logistic(
    data: &[Observation],
    d: usize,
    sigma0: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DenseGaussian> {
    if !(sigma0 > 0.0) {
        return Err(LrvgaError::InvalidParameter(format!(
            "prior scale must be positive, got {sigma0}"
        )));
    }
    let mut rows = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for obs in data {
        check_dim(d, obs.dim())?;
        labels.push(obs.label()?);
        rows.push(obs.x.to_dense());
    }
    let prior_prec = 1.0 / (sigma0 * sigma0);
    let objective = |theta: &DVector<f64>| -logposterior_logistic(theta.as_view(), data, sigma0);

    let mut theta = DVector::zeros(d);
    let mut value = objective(&theta);
    for _ in 0..max_iter {
        let (grad, hess) = logistic_grad_hessian(&rows, &labels, &theta, prior_prec);
        if grad.norm() < tol {
            return finish_laplace(theta, hess);
        }
        let chol = hess
            .cholesky()
            .ok_or(LrvgaError::NotPositiveDefinite("Laplace Hessian"))?;
        let step = chol.solve(&grad);
        let slope = grad.dot(&step);
        let mut t = 1.0;
        loop {
            let cand = &theta - &step * t;
            let cand_value = objective(&cand);
            if cand_value <= value - 1e-4 * t * slope || t < 1e-10 {
                theta = cand;
                value = cand_value;
                break;
            }
            t *= 0.5;
        }
    }
    let (grad, hess) = logistic_grad_hessian(&rows, &labels, &theta, prior_prec);
    if grad.norm() < tol {
        return finish_laplace(theta, hess);
    }
    Err(LrvgaError::Convergence(format!(
        "Laplace Newton stopped after {max_iter} iterations with gradient norm {:e}",
        grad.norm()
    )))
}

fn finish_laplace(theta: DVector<f64>, hess: DMatrix<f64>) -> Result<DenseGaussian> {
    let mut cov = hess
        .cholesky()
        .ok_or(LrvgaError::NotPositiveDefinite("Laplace Hessian"))?
        .inverse();
    symmetrize(&mut cov);
    DenseGaussian::new(theta, cov)
}

/// Gradient and Hessian of the negative log posterior.
pub(crate) fn logistic_grad_hessian(
    rows: &[DVector<f64>],
    labels: &[f64],
    theta: &DVector<f64>,
    prior_prec: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = theta.len();
    let mut grad = theta * prior_prec;
    let mut hess = DMatrix::identity(d, d) * prior_prec;
    for (x, &y) in rows.iter().zip(labels) {
        let z = x.dot(theta);
        grad.axpy(sigmoid(z) - y, x, 1.0);
        hess.ger(sigmoid_prime(z), x, x, 1.0);
    }
    (grad, hess)
}

/// Dense precision of a factor-analysis belief; desk-scale diagnostics only.
pub fn dense_precision(belief: &GaussianBelief) -> DMatrix<f64> {
    fa_to_dense(&belief.prec)
}
