use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::Rng;

use super::logistic::{sigmoid, sigmoid_prime};
use super::{check_divergence, GaussianBelief};
use crate::error::{check_dim, LrvgaError, Result};
use crate::fa::{recursive_em_update, FaPrecision, RecursionWeights};
use crate::observation::Observation;
use crate::sampler::EnsembleSampler;

/// An exponential-family observation model `p(y | θ)` with natural parameter
/// `η = h(θ, x) ∈ ℝᵐ`.
pub trait NonlinearModel {
    /// Dimension `m` of the natural parameter.
    fn output_dim(&self) -> usize;

    fn natural_parameter(&self, theta: DVectorView<'_, f64>, x: &crate::Features) -> DVector<f64>;

    /// `(∂h/∂θ) v` for `v ∈ ℝᵐ`: a vector in parameter space.
    fn jacobian_apply(
        &self,
        theta: DVectorView<'_, f64>,
        x: &crate::Features,
        v: &DVector<f64>,
    ) -> DVector<f64>;

    /// A square root `R` of the sufficient-statistic covariance, `R Rᵀ = Cov(y | η)`.
    fn cov_sqrt(&self, eta: &DVector<f64>) -> Result<DMatrix<f64>>;

    fn log_likelihood(&self, theta: DVectorView<'_, f64>, obs: &Observation) -> Result<f64>;

    fn grad_log_likelihood(
        &self,
        theta: DVectorView<'_, f64>,
        obs: &Observation,
    ) -> Result<DVector<f64>>;
}

/// Bernoulli with logit `xᵀθ`.
#[derive(Debug, Clone, Copy, Default)]
pub struct LogisticModel;

impl NonlinearModel for LogisticModel {
    fn output_dim(&self) -> usize {
        1
    }

    fn natural_parameter(&self, theta: DVectorView<'_, f64>, x: &crate::Features) -> DVector<f64> {
        DVector::from_element(1, features_dot(x, theta))
    }

    fn jacobian_apply(
        &self,
        _theta: DVectorView<'_, f64>,
        x: &crate::Features,
        v: &DVector<f64>,
    ) -> DVector<f64> {
        x.to_dense() * v[0]
    }

    fn cov_sqrt(&self, eta: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_element(1, 1, sigmoid_prime(eta[0]).sqrt()))
    }

    fn log_likelihood(&self, theta: DVectorView<'_, f64>, obs: &Observation) -> Result<f64> {
        check_dim(theta.len(), obs.dim())?;
        let y = obs.label()?;
        let z = features_dot(&obs.x, theta);
        // y z − log(1 + e^z), computed without overflow
        Ok(y * z - softplus(z))
    }

    fn grad_log_likelihood(
        &self,
        theta: DVectorView<'_, f64>,
        obs: &Observation,
    ) -> Result<DVector<f64>> {
        check_dim(theta.len(), obs.dim())?;
        let y = obs.label()?;
        let z = features_dot(&obs.x, theta);
        let mut g = DVector::zeros(theta.len());
        obs.x.axpy_into(y - sigmoid(z), &mut g);
        Ok(g)
    }
}

/// `y = xᵀθ + N(0, noise_var)`.
#[derive(Debug, Clone, Copy)]
pub struct LinearGaussianModel {
    pub noise_var: f64,
}

impl Default for LinearGaussianModel {
    fn default() -> Self {
        Self { noise_var: 1.0 }
    }
}

impl NonlinearModel for LinearGaussianModel {
    fn output_dim(&self) -> usize {
        1
    }

    fn natural_parameter(&self, theta: DVectorView<'_, f64>, x: &crate::Features) -> DVector<f64> {
        DVector::from_element(1, features_dot(x, theta))
    }

    fn jacobian_apply(
        &self,
        _theta: DVectorView<'_, f64>,
        x: &crate::Features,
        v: &DVector<f64>,
    ) -> DVector<f64> {
        x.to_dense() * v[0]
    }

    fn cov_sqrt(&self, _eta: &DVector<f64>) -> Result<DMatrix<f64>> {
        if !(self.noise_var > 0.0) {
            return Err(LrvgaError::InvalidParameter(format!(
                "noise variance must be positive, got {}",
                self.noise_var
            )));
        }
        Ok(DMatrix::from_element(1, 1, 1.0 / self.noise_var.sqrt()))
    }

    fn log_likelihood(&self, theta: DVectorView<'_, f64>, obs: &Observation) -> Result<f64> {
        check_dim(theta.len(), obs.dim())?;
        let r = obs.label()? - features_dot(&obs.x, theta);
        Ok(-0.5 * (r * r / self.noise_var + (2.0 * std::f64::consts::PI * self.noise_var).ln()))
    }

    fn grad_log_likelihood(
        &self,
        theta: DVectorView<'_, f64>,
        obs: &Observation,
    ) -> Result<DVector<f64>> {
        check_dim(theta.len(), obs.dim())?;
        let r = obs.label()? - features_dot(&obs.x, theta);
        let mut g = DVector::zeros(theta.len());
        obs.x.axpy_into(r / self.noise_var, &mut g);
        Ok(g)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn features_dot(x: &crate::Features, theta: DVectorView<'_, f64>) -> f64 {
    match x {
        crate::Features::Dense(v) => v.dot(&theta),
        crate::Features::Sparse(s) => s.iter().map(|(i, v)| v * theta[i]).sum(),
    }
}

/// Generalized Gauss-Newton factor: columns `J(θᵢ) R(θᵢ)_{:,j} / √K` so that
/// `X Xᵀ` is the sampled GGN approximation of the negative Hessian.
pub fn ggn_block<M: NonlinearModel + ?Sized>(
    model: &M,
    obs: &Observation,
    samples: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_dim(obs.dim(), samples.nrows())?;
    let k = samples.ncols();
    if k == 0 {
        return Err(LrvgaError::InvalidParameter(
            "GGN needs at least one sample".into(),
        ));
    }
    let m = model.output_dim();
    let scale = 1.0 / (k as f64).sqrt();
    let mut block = DMatrix::zeros(samples.nrows(), k * m);
    for (i, theta) in samples.column_iter().enumerate() {
        let theta = theta.into_owned();
        let eta = model.natural_parameter(theta.as_view(), &obs.x);
        let r = model.cov_sqrt(&eta)?;
        if r.nrows() != m || r.ncols() != m || r.iter().any(|v| !v.is_finite()) {
            return Err(LrvgaError::NotPositiveDefinite("observation covariance"));
        }
        for j in 0..m {
            let c = model.jacobian_apply(theta.as_view(), &obs.x, &r.column(j).into_owned());
            block.column_mut(i * m + j).copy_from(&(c * scale));
        }
    }
    Ok(block)
}

/// Monte Carlo estimate of `E_q[f(θ)]` under the belief from `k` ensemble draws.
pub fn expectation_by_sampling<F, R>(
    f: F,
    belief: &GaussianBelief,
    k: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(DVectorView<'_, f64>) -> f64,
    R: Rng + ?Sized,
{
    let mut sampler = EnsembleSampler::new(&belief.prec, rng)?;
    let samples = sampler.draw(&belief.mu, k)?;
    let total: f64 = samples.column_iter().map(|c| f(c)).sum();
    Ok(total / k as f64)
}

/// Update scheme of the sampled nonlinear filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Scheme {
    /// One stage: expectations taken at the prior belief.
    Explicit,
    /// Two stages; the second recomputes both mean and precision from the
    /// prior, with expectations at the first-stage belief.
    MirrorProxFull,
    /// Two stages; the second only recomputes the mean.
    #[default]
    MirrorProxSkipCov,
}

impl FromStr for Scheme {
    type Err = LrvgaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explicit" => Ok(Self::Explicit),
            "mirror-prox-full" => Ok(Self::MirrorProxFull),
            "mirror-prox-skip-cov" => Ok(Self::MirrorProxSkipCov),
            other => Err(LrvgaError::InvalidParameter(format!(
                "unknown scheme `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Explicit => "explicit",
            Self::MirrorProxFull => "mirror-prox-full",
            Self::MirrorProxSkipCov => "mirror-prox-skip-cov",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonlinearConfig {
    /// Samples for the GGN block.
    pub k_hess: usize,
    /// Samples for the mean gradient.
    pub k_grad: usize,
    pub inner_loops: usize,
    pub scheme: Scheme,
    /// Draw new samples in the second stage. When false the second stage
    /// replays the first stage's random stream at the new belief.
    pub fresh_samples: bool,
}

impl Default for NonlinearConfig {
    fn default() -> Self {
        Self {
            k_hess: 1,
            k_grad: 1,
            inner_loops: 1,
            scheme: Scheme::default(),
            fresh_samples: true,
        }
    }
}

struct StageStats {
    block: DMatrix<f64>,
    grad: DVector<f64>,
}

fn stage_stats<M: NonlinearModel + ?Sized, R: Rng>(
    model: &M,
    obs: &Observation,
    mu: &DVector<f64>,
    prec: &FaPrecision,
    cfg: &NonlinearConfig,
    rng: &mut R,
) -> Result<StageStats> {
    let k = cfg.k_hess.max(cfg.k_grad);
    let mut sampler = EnsembleSampler::new(prec, &mut *rng)?;
    let samples = sampler.draw(mu, k)?;
    let block = ggn_block(model, obs, &samples.columns(0, cfg.k_hess).into_owned())?;
    let mut grad = DVector::zeros(mu.len());
    for theta in samples.columns(0, cfg.k_grad).column_iter() {
        grad += model.grad_log_likelihood(theta, obs)?;
    }
    grad /= cfg.k_grad as f64;
    Ok(StageStats { block, grad })
}

/// One update of the sampled filter for a general observation model.
pub fn lrvga_nonlinear_step<M, R>(
    belief: &GaussianBelief,
    obs: &Observation,
    model: &M,
    cfg: &NonlinearConfig,
    rng: &mut R,
) -> Result<GaussianBelief>
where
    M: NonlinearModel + ?Sized,
    R: Rng + Clone,
{
    check_dim(belief.dim(), obs.dim())?;
    if cfg.k_hess == 0 || cfg.k_grad == 0 {
        return Err(LrvgaError::InvalidParameter(
            "sample counts must be positive".into(),
        ));
    }
    let replay = (!cfg.fresh_samples).then(|| rng.clone());

    let first = stage_stats(model, obs, &belief.mu, &belief.prec, cfg, rng)?;
    let weights = RecursionWeights::accumulate();
    let hat = recursive_em_update(&belief.prec, &first.block, weights, cfg.inner_loops)?;
    let mu_hat = &belief.mu + hat.fa.woodbury_apply(&first.grad)?;
    if cfg.scheme == Scheme::Explicit {
        let next = GaussianBelief {
            mu: mu_hat,
            prec: hat.fa,
        };
        check_divergence(&next, hat.clamped)?;
        return Ok(next);
    }
    let provisional = GaussianBelief {
        mu: mu_hat,
        prec: hat.fa,
    };
    check_divergence(&provisional, hat.clamped)?;

    let second = match replay {
        Some(mut r) => stage_stats(model, obs, &provisional.mu, &provisional.prec, cfg, &mut r)?,
        None => stage_stats(model, obs, &provisional.mu, &provisional.prec, cfg, rng)?,
    };
    let (prec, clamped) = match cfg.scheme {
        Scheme::MirrorProxFull => {
            let out = recursive_em_update(&belief.prec, &second.block, weights, cfg.inner_loops)?;
            (out.fa, out.clamped)
        }
        _ => (provisional.prec, hat.clamped),
    };
    let next = GaussianBelief {
        mu: &belief.mu + prec.woodbury_apply(&second.grad)?,
        prec,
    };
    check_divergence(&next, clamped)?;
    Ok(next)
}
