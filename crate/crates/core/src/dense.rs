//! Dense `d×d` baselines and oracles. Everything here is quadratic in `d` in
//! memory and meant for desk-scale comparisons only.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, LrvgaError, Result};
use crate::fa::{FaPrecision, SymmetricOperator, PSI_FLOOR};
use crate::linalg::{spd_log_det, symmetrize};

/// A Gaussian with an explicit mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl DenseGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim(mean.len(), cov.nrows())?;
        check_dim(mean.len(), cov.ncols())?;
        Ok(Self { mean, cov })
    }

    /// `N(0, σ₀² I)`.
    pub fn isotropic(d: usize, sigma0: f64) -> Self {
        Self {
            mean: DVector::zeros(d),
            cov: DMatrix::identity(d, d) * (sigma0 * sigma0),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> Result<DMatrix<f64>> {
        let mut inv = self
            .cov
            .clone()
            .cholesky()
            .ok_or(LrvgaError::NotPositiveDefinite("dense covariance"))?
            .inverse();
        symmetrize(&mut inv);
        Ok(inv)
    }

    pub fn log_det_cov(&self) -> Result<f64> {
        spd_log_det(&self.cov).ok_or(LrvgaError::NotPositiveDefinite("dense covariance"))
    }
}

/// Materializes `W Wᵀ + Ψ`.
pub fn fa_to_dense(fa: &FaPrecision) -> DMatrix<f64> {
    let mut out = fa.w() * fa.w().transpose();
    for (i, v) in fa.psi().iter().enumerate() {
        out[(i, i)] += v;
    }
    out
}

/// Dense symmetric matrix exposed through the operator interface of the EM step.
#[derive(Debug, Clone, Copy)]
pub struct DenseSymmetric<'a>(pub &'a DMatrix<f64>);

impl SymmetricOperator for DenseSymmetric<'_> {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        self.0 * a
    }

    fn diagonal(&self) -> DVector<f64> {
        self.0.diagonal()
    }
}

/// One cycle of the maximum-likelihood fixed point
/// `W' = S (W Wᵀ + Ψ)⁻¹ W`, `Ψ' = diag(S − W' W'ᵀ)`, in dense arithmetic.
pub fn mle_fixed_point_step(fa: &FaPrecision, s: &DMatrix<f64>) -> Result<FaPrecision> {
    check_dim(fa.dim(), s.nrows())?;
    let sigma = fa_to_dense(fa);
    let chol = sigma
        .cholesky()
        .ok_or(LrvgaError::NotPositiveDefinite("W Wᵀ + Ψ"))?;
    let w_new = s * chol.solve(fa.w());
    let psi = (s - &w_new * w_new.transpose())
        .diagonal()
        .map(|v| v.max(PSI_FLOOR));
    FaPrecision::new(w_new, psi)
}

/// Per-sample Gaussian log-likelihood of data with second moment `S` under
/// `N(0, W Wᵀ + Ψ)`: `−½ Tr(Σ⁻¹ S) − ½ log det Σ − (d/2) log 2π`.
pub fn fa_log_likelihood(fa: &FaPrecision, s: &DMatrix<f64>) -> Result<f64> {
    check_dim(fa.dim(), s.nrows())?;
    let d = fa.dim() as f64;
    let chol = fa_to_dense(fa)
        .cholesky()
        .ok_or(LrvgaError::NotPositiveDefinite("W Wᵀ + Ψ"))?;
    let trace = chol.solve(s).trace();
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * trace - 0.5 * log_det - 0.5 * d * (2.0 * std::f64::consts::PI).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mle_step_is_stationary_on_exact_target() {
        let w = DMatrix::from_row_slice(4, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, 0.1, 0.0, -1.0]);
        let fa = FaPrecision::new(w, DVector::from_vec(vec![0.5, 1.0, 2.0, 0.3])).unwrap();
        let s = fa_to_dense(&fa);
        let out = mle_fixed_point_step(&fa, &s).unwrap();
        assert!((out.w() - fa.w()).amax() < 1e-12);
        assert!((out.psi() - fa.psi()).amax() < 1e-12);
    }

    #[test]
    fn dense_gaussian_shape_checks() {
        assert!(DenseGaussian::new(DVector::zeros(2), DMatrix::identity(3, 3)).is_err());
        let g = DenseGaussian::isotropic(3, 2.0);
        assert!((g.log_det_cov().unwrap() - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((g.precision().unwrap()[(1, 1)] - 0.25).abs() < 1e-15);
    }
}
