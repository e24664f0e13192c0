//! Sampling from `N(μ, (W Wᵀ + Ψ)⁻¹)` without forming or inverting a `d×d` matrix.
//!
//! With `M = I + Wᵀ Ψ⁻¹ W` and `L = Ψ⁻¹ W M⁻¹`, draw `x ~ N(0, Ψ⁻¹)` and
//! `ε ~ N(0, I_p)` independently; then `x⁺ = (I − L Wᵀ) x + L ε` has covariance
//! exactly `(W Wᵀ + Ψ)⁻¹`. Drawing `K` samples costs `O(K d p)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, check_finite, LrvgaError, Result};
use crate::fa::FaPrecision;

/// Ensemble sampler bound to one precision matrix; owns its generator.
#[derive(Debug, Clone)]
pub struct EnsembleSampler<R> {
    w: DMatrix<f64>,
    inv_sqrt_psi: DVector<f64>,
    gain: DMatrix<f64>,
    rng: R,
}

impl<R: Rng> EnsembleSampler<R> {
    pub fn new(fa: &FaPrecision, rng: R) -> Result<Self> {
        let mut sampler = Self {
            w: DMatrix::zeros(0, 0),
            inv_sqrt_psi: DVector::zeros(0),
            gain: DMatrix::zeros(0, 0),
            rng,
        };
        sampler.set_precision(fa)?;
        Ok(sampler)
    }

    /// Rebinds the sampler to a new precision and recomputes the cached gain.
    pub fn set_precision(&mut self, fa: &FaPrecision) -> Result<()> {
        check_finite(fa.psi().iter(), "sampler diagonal")?;
        self.w = fa.w().clone();
        self.inv_sqrt_psi = fa.psi().map(|v| 1.0 / v.sqrt());
        self.gain = fa.sampling_gain();
        Ok(())
    }

    /// The cached `L = Ψ⁻¹ W M⁻¹`.
    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }

    pub fn into_rng(self) -> R {
        self.rng
    }

    /// `k` draws from `N(mu, (W Wᵀ + Ψ)⁻¹)`, one per column.
    pub fn draw(&mut self, mu: &DVector<f64>, k: usize) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), mu.len())?;
        if k == 0 {
            return Err(LrvgaError::InvalidParameter(
                "sample count must be positive".into(),
            ));
        }
        let (d, p) = self.w.shape();
        let mut x = DMatrix::zeros(d, k);
        let mut eps = DMatrix::zeros(p, k);
        for j in 0..k {
            for i in 0..d {
                let z: f64 = self.rng.sample(StandardNormal);
                x[(i, j)] = z * self.inv_sqrt_psi[i];
            }
            for i in 0..p {
                eps[(i, j)] = self.rng.sample(StandardNormal);
            }
        }
        // x⁺ = x + L (ε − Wᵀ x)
        eps.gemm_tr(-1.0, &self.w, &x, 1.0);
        x.gemm(1.0, &self.gain, &eps, 1.0);
        for mut col in x.column_iter_mut() {
            col += mu;
        }
        Ok(x)
    }
}

/// `k` draws from `N(mu, cov)` through the Cholesky factor of a dense covariance.
pub fn draw_dense_reference<R: Rng + ?Sized>(
    mu: &DVector<f64>,
    cov: &DMatrix<f64>,
    k: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    check_dim(mu.len(), cov.nrows())?;
    check_dim(mu.len(), cov.ncols())?;
    if k == 0 {
        return Err(LrvgaError::InvalidParameter(
            "sample count must be positive".into(),
        ));
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or(LrvgaError::NotPositiveDefinite("reference covariance"))?;
    let d = mu.len();
    let z = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut out = chol.l() * z;
    for mut col in out.column_iter_mut() {
        col += mu;
    }
    Ok(out)
}
