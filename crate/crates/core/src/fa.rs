//! Factor-analysis ("low-rank + diagonal") precision matrices and the EM
//! machinery that keeps them up to date.
//!
//! A precision matrix is stored as `W Wᵀ + Ψ` with `W` of shape `d×p` and `Ψ`
//! diagonal. Every routine in this module works in `O(d p²)` time and `O(d p)`
//! memory: the `d×d` matrices that appear in the algebra are only ever touched
//! through products with `d×p` blocks and through their diagonals.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, check_finite, LrvgaError, Result};
use crate::linalg::{div_rows, row_dot, spd_log_det, spd_right_solve, spd_solve_vec};

/// Lower bound applied to every diagonal entry produced by an M-step.
pub const PSI_FLOOR: f64 = 1e-12;

/// Default `ε` of [`init_isotropic_prior`].
pub const DEFAULT_INIT_EPS: f64 = 0.01;

/// Default number of EM cycles per observation: 3 up to `d = 1000`, 1 above.
pub fn default_inner_loops(d: usize) -> usize {
    if d <= 1000 {
        3
    } else {
        1
    }
}

/// Precision matrix in factor-analysis form `W Wᵀ + Ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FaPrecision {
    w: DMatrix<f64>,
    psi: DVector<f64>,
}

impl FaPrecision {
    pub fn new(w: DMatrix<f64>, psi: DVector<f64>) -> Result<Self> {
        check_dim(w.nrows(), psi.len())?;
        if w.ncols() > w.nrows() {
            return Err(LrvgaError::InvalidParameter(format!(
                "latent rank {} exceeds dimension {}",
                w.ncols(),
                w.nrows()
            )));
        }
        check_finite(w.iter(), "factor loadings")?;
        check_finite(psi.iter(), "diagonal")?;
        if psi.iter().any(|&v| v <= 0.0) {
            return Err(LrvgaError::InvalidParameter(
                "diagonal entries must be strictly positive".into(),
            ));
        }
        Ok(Self { w, psi })
    }

    /// `Ψ = psi·I` and `W = 0`.
    pub fn isotropic(d: usize, p: usize, psi: f64) -> Result<Self> {
        Self::new(DMatrix::zeros(d, p), DVector::from_element(d, psi))
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn psi(&self) -> &DVector<f64> {
        &self.psi
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DVector<f64>) {
        (self.w, self.psi)
    }

    /// `Ψ⁻¹ W`.
    pub fn scaled_loadings(&self) -> DMatrix<f64> {
        div_rows(&self.w, &self.psi)
    }

    pub fn latent_gram(&self) -> LatentGram {
        LatentGram::from_scaled(&self.w, &self.scaled_loadings())
    }

    /// `(W Wᵀ + Ψ)⁻¹ v` through the Woodbury identity.
    pub fn woodbury_apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), v.len())?;
        check_finite(v.iter(), "woodbury right-hand side")?;
        let gram = self.latent_gram();
        Ok(self.woodbury_apply_with(&gram, v))
    }

    /// Same as [`woodbury_apply`](Self::woodbury_apply) with a precomputed `M`.
    pub fn woodbury_apply_with(&self, gram: &LatentGram, v: &DVector<f64>) -> DVector<f64> {
        let scaled = v.component_div(&self.psi);
        let latent = spd_solve_vec(&gram.m, &(self.w.transpose() * &scaled));
        let mut out = v - &self.w * latent;
        out.component_div_assign(&self.psi);
        out
    }

    /// `(W Wᵀ + Ψ) v`.
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), v.len())?;
        Ok(&self.w * (self.w.transpose() * v) + self.psi.component_mul(v))
    }

    /// `log det(W Wᵀ + Ψ)` through the matrix determinant lemma.
    pub fn log_det(&self) -> Result<f64> {
        if self.psi.iter().any(|&v| v <= 0.0) {
            return Err(LrvgaError::InvalidParameter(
                "diagonal entries must be strictly positive".into(),
            ));
        }
        let gram = self.latent_gram();
        let log_det_m =
            spd_log_det(&gram.m).ok_or(LrvgaError::NotPositiveDefinite("latent gram matrix"))?;
        Ok(log_det_m + self.psi.iter().map(|v| v.ln()).sum::<f64>())
    }

    /// `L = Ψ⁻¹ W M⁻¹`, the gain used by the ensemble sampler.
    pub fn sampling_gain(&self) -> DMatrix<f64> {
        let scaled = self.scaled_loadings();
        let gram = LatentGram::from_scaled(&self.w, &scaled);
        spd_right_solve(&scaled, &gram.m)
    }

    /// `Tr (W Wᵀ + Ψ)⁻¹`.
    pub fn covariance_trace(&self) -> f64 {
        let scaled = self.scaled_loadings();
        let gain = spd_right_solve(&scaled, &LatentGram::from_scaled(&self.w, &scaled).m);
        self.psi.iter().map(|v| 1.0 / v).sum::<f64>() - gain.component_mul(&scaled).sum()
    }

    /// Number of diagonal entries sitting on [`PSI_FLOOR`].
    pub fn floored_count(&self) -> usize {
        self.psi.iter().filter(|&&v| v <= PSI_FLOOR).count()
    }
}

/// The `p×p` matrix `M = I + Wᵀ Ψ⁻¹ W`.
#[derive(Debug, Clone)]
pub struct LatentGram {
    m: DMatrix<f64>,
}

impl LatentGram {
    fn from_scaled(w: &DMatrix<f64>, scaled: &DMatrix<f64>) -> Self {
        let p = w.ncols();
        let mut m = w.transpose() * scaled;
        for i in 0..p {
            m[(i, i)] += 1.0;
        }
        crate::linalg::symmetrize(&mut m);
        Self { m }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
}

/// `diag(X Yᵀ)` for two matrices of equal shape, computed row by row.
pub fn star(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_dim(x.nrows(), y.nrows())?;
    check_dim(x.ncols(), y.ncols())?;
    Ok(row_dot(x, y))
}

/// Scalars of the recursion `W_t W_tᵀ + Ψ_t ≈ α (W_{t-1} W_{t-1}ᵀ + Ψ_{t-1}) + β X Xᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecursionWeights {
    alpha: f64,
    beta: f64,
}

impl RecursionWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha + beta > 0.0) || !(alpha + beta).is_finite() {
            return Err(LrvgaError::InvalidParameter(format!(
                "recursion weights must be nonnegative with positive sum, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    /// `α = β = 1`: information accumulation for precision matrices.
    pub fn accumulate() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Running-average weights `((t-1)/t, 1/t)` for factorizing an empirical covariance.
pub fn covariance_mode_weights(t: usize) -> Result<RecursionWeights> {
    if t == 0 {
        return Err(LrvgaError::InvalidParameter(
            "step index starts at 1".into(),
        ));
    }
    let t = t as f64;
    RecursionWeights::new((t - 1.0) / t, 1.0 / t)
}

/// Initializes `W₀ W₀ᵀ + Ψ₀ ≈ I/σ₀²` with `Tr(W₀ W₀ᵀ + Ψ₀) = d/σ₀²` exactly.
///
/// `W₀ = 0` is a stationary point of the EM map, so a small fraction `ε` of the
/// prior trace is moved into random factor directions.
pub fn init_isotropic_prior<R: Rng + ?Sized>(
    d: usize,
    p: usize,
    sigma0: f64,
    eps: f64,
    rng: &mut R,
) -> Result<FaPrecision> {
    if p == 0 || p > d {
        return Err(LrvgaError::InvalidParameter(format!(
            "need 1 <= p <= d, got p = {p}, d = {d}"
        )));
    }
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(LrvgaError::InvalidParameter(format!(
            "prior scale must be positive, got {sigma0}"
        )));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(LrvgaError::InvalidParameter(format!(
            "eps must lie in (0, 1), got {eps}"
        )));
    }
    let psi0 = (1.0 - eps) / (sigma0 * sigma0);
    let w0 = (eps * d as f64 / p as f64).sqrt() / sigma0;
    let mut w = DMatrix::zeros(d, p);
    for mut col in w.column_iter_mut() {
        let mut norm_sq: f64 = 0.0;
        while norm_sq == 0.0 {
            for v in col.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            norm_sq = col.norm_squared();
        }
        col *= w0 / norm_sq.sqrt();
    }
    FaPrecision::new(w, DVector::from_element(d, psi0))
}

/// `σ₀ = sqrt(d / mean ‖x‖²)`, so that `Tr(I/σ₀²)` matches the mean squared input norm.
pub fn guess_s0_scale(batch: &[DVector<f64>], d: usize) -> Result<f64> {
    for x in batch {
        check_dim(d, x.len())?;
    }
    guess_s0_scale_from_norms(batch.iter().map(|x| x.norm_squared()), d)
}

pub(crate) fn guess_s0_scale_from_norms(
    squared_norms: impl IntoIterator<Item = f64>,
    d: usize,
) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in squared_norms {
        sum += v;
        n += 1;
    }
    if n == 0 {
        return Err(LrvgaError::InvalidParameter("empty batch".into()));
    }
    if !(sum > 0.0) || !sum.is_finite() {
        return Err(LrvgaError::InvalidParameter(
            "batch has no nonzero finite input".into(),
        ));
    }
    Ok((d as f64 / (sum / n as f64)).sqrt())
}

/// A symmetric `d×d` matrix `S` reachable only through `S·A` and `diag(S)`.
pub trait SymmetricOperator {
    fn dim(&self) -> usize;

    /// `S · a` for a `d×k` block `a`.
    fn apply(&self, a: &DMatrix<f64>) -> DMatrix<f64>;

    fn diagonal(&self) -> DVector<f64>;
}

impl SymmetricOperator for FaPrecision {
    fn dim(&self) -> usize {
        self.w.nrows()
    }

    fn apply(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.w * (self.w.transpose() * a);
        for (mut col, a_col) in out.column_iter_mut().zip(a.column_iter()) {
            col += self.psi.component_mul(&a_col);
        }
        out
    }

    fn diagonal(&self) -> DVector<f64> {
        row_dot(&self.w, &self.w) + &self.psi
    }
}

/// `α (W Wᵀ + Ψ) + β X Xᵀ`, the target of one recursive EM update.
#[derive(Debug, Clone, Copy)]
pub struct RecursiveTarget<'a> {
    prev: &'a FaPrecision,
    block: &'a DMatrix<f64>,
    weights: RecursionWeights,
}

impl<'a> RecursiveTarget<'a> {
    pub fn new(
        prev: &'a FaPrecision,
        block: &'a DMatrix<f64>,
        weights: RecursionWeights,
    ) -> Result<Self> {
        check_dim(prev.dim(), block.nrows())?;
        Ok(Self {
            prev,
            block,
            weights,
        })
    }
}

impl SymmetricOperator for RecursiveTarget<'_> {
    fn dim(&self) -> usize {
        self.prev.dim()
    }

    fn apply(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = SymmetricOperator::apply(self.prev, a);
        out *= self.weights.alpha;
        if self.block.ncols() > 0 {
            let proj = self.block.transpose() * a;
            out.gemm(self.weights.beta, self.block, &proj, 1.0);
        }
        out
    }

    fn diagonal(&self) -> DVector<f64> {
        let mut diag = SymmetricOperator::diagonal(self.prev) * self.weights.alpha;
        diag.axpy(self.weights.beta, &row_dot(self.block, self.block), 1.0);
        diag
    }
}

/// Result of one or more EM cycles.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub fa: FaPrecision,
    /// Diagonal entries clamped to [`PSI_FLOOR`] in the last cycle.
    pub clamped: usize,
}

/// One cycle of the fused E/M fixed point
/// `W' = S Ψ⁻¹ W (I + M⁻¹ Wᵀ Ψ⁻¹ S Ψ⁻¹ W)⁻¹`, `Ψ' = diag(S − W' M⁻¹ Wᵀ Ψ⁻¹ S)`.
pub fn em_fixed_point_step<S: SymmetricOperator + ?Sized>(
    fa: &FaPrecision,
    s: &S,
) -> Result<FitOutcome> {
    check_dim(fa.dim(), s.dim())?;
    let scaled = fa.scaled_loadings();
    let gram = LatentGram::from_scaled(&fa.w, &scaled);
    let b = s.apply(&scaled);
    let mut system = scaled.transpose() * &b;
    system += &gram.m;
    crate::linalg::symmetrize(&mut system);
    // (I + M⁻¹G)⁻¹ = (M + G)⁻¹ M, so W' M⁻¹ = B (M + G)⁻¹.
    let c = spd_right_solve(&b, &system);
    let w_new = &c * &gram.m;
    let mut psi_new = s.diagonal() - row_dot(&c, &b);
    let mut clamped = 0;
    for v in psi_new.iter_mut() {
        if !v.is_finite() {
            return Err(LrvgaError::Divergence(
                "non-finite diagonal in EM update".into(),
            ));
        }
        if *v < PSI_FLOOR {
            *v = PSI_FLOOR;
            clamped += 1;
        }
    }
    if w_new.iter().any(|v| !v.is_finite()) {
        return Err(LrvgaError::Divergence(
            "non-finite loadings in EM update".into(),
        ));
    }
    if clamped > 0 {
        log::debug!("{clamped} diagonal entries clamped to {PSI_FLOOR}");
    }
    Ok(FitOutcome {
        fa: FaPrecision {
            w: w_new,
            psi: psi_new,
        },
        clamped,
    })
}

/// Fits `W Wᵀ + Ψ ≈ α (W_{t-1} W_{t-1}ᵀ + Ψ_{t-1}) + β X Xᵀ` by `inner_loops`
/// EM cycles started at `prev`.
pub fn recursive_em_update(
    prev: &FaPrecision,
    block: &DMatrix<f64>,
    weights: RecursionWeights,
    inner_loops: usize,
) -> Result<FitOutcome> {
    if inner_loops == 0 {
        return Err(LrvgaError::InvalidParameter(
            "at least one inner loop is required".into(),
        ));
    }
    if block.ncols() == 0 {
        return Err(LrvgaError::InvalidParameter(
            "input block has no columns".into(),
        ));
    }
    check_finite(block.iter(), "input block")?;
    let target = RecursiveTarget::new(prev, block, weights)?;
    let mut outcome = em_fixed_point_step(prev, &target)?;
    for _ in 1..inner_loops {
        outcome = em_fixed_point_step(&outcome.fa, &target)?;
    }
    Ok(outcome)
}

/// Online EM step size `γ_t = t^{-0.6}` (so `γ_1 = 1`).
pub fn online_em_step_size(t: usize) -> f64 {
    (t.max(1) as f64).powf(-0.6)
}

/// Sufficient statistics of the online EM for factor analysis, with only
/// the diagonal of the `d×d` block stored.
#[derive(Debug, Clone)]
pub struct OnlineEmState {
    pub s1_diag: DVector<f64>,
    pub s2: DMatrix<f64>,
    pub s3: DMatrix<f64>,
    pub step_index: usize,
    averaged: Option<FaPrecision>,
}

impl OnlineEmState {
    pub fn new(d: usize, p: usize) -> Self {
        Self {
            s1_diag: DVector::zeros(d),
            s2: DMatrix::zeros(p, d),
            s3: DMatrix::zeros(p, p),
            step_index: 0,
            averaged: None,
        }
    }

    /// The current Polyak-Ruppert average, if averaging has started.
    pub fn averaged(&self) -> Option<&FaPrecision> {
        self.averaged.as_ref()
    }
}

/// One stochastic E-step on `v` (statistics blended with weight `gamma`)
/// followed by the closed-form M-step.
pub fn online_em_update(
    state: &mut OnlineEmState,
    fa: &FaPrecision,
    v: &DVector<f64>,
    gamma: f64,
) -> Result<FitOutcome> {
    check_dim(fa.dim(), v.len())?;
    check_dim(fa.dim(), state.s1_diag.len())?;
    check_dim(fa.rank(), state.s3.nrows())?;
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(LrvgaError::InvalidParameter(format!(
            "step size must lie in (0, 1], got {gamma}"
        )));
    }
    check_finite(v.iter(), "online EM sample")?;
    let p = fa.rank();
    let scaled = fa.scaled_loadings();
    let gram = LatentGram::from_scaled(&fa.w, &scaled);
    let m_inv = crate::linalg::spd_solve(&gram.m, &DMatrix::identity(p, p));
    // E[z | v] = M⁻¹ Wᵀ Ψ⁻¹ v
    let z = &m_inv * (scaled.transpose() * v);

    let keep = 1.0 - gamma;
    state.s1_diag *= keep;
    state.s1_diag.axpy(gamma, &v.component_mul(v), 1.0);
    state.s2 *= keep;
    state.s2.ger(gamma, &z, v, 1.0);
    state.s3 *= keep;
    state.s3 += (m_inv + &z * z.transpose()) * gamma;
    crate::linalg::symmetrize(&mut state.s3);
    state.step_index += 1;

    let chol = state
        .s3
        .clone()
        .cholesky()
        .ok_or(LrvgaError::NotPositiveDefinite("online EM statistic S3"))?;
    // W = S2ᵀ S3⁻¹
    let w = chol.solve(&state.s2).transpose();
    let mut psi = &state.s1_diag - row_dot(&w, &state.s2.transpose());
    let mut clamped = 0;
    for v in psi.iter_mut() {
        if *v < PSI_FLOOR {
            *v = PSI_FLOOR;
            clamped += 1;
        }
    }
    check_finite(w.iter(), "online EM loadings")?;
    Ok(FitOutcome {
        fa: FaPrecision { w, psi },
        clamped,
    })
}

/// Folds iterate `fa` at step `t` of `n` into the halfway Polyak-Ruppert
/// average and returns the updated average.
pub fn polyak_ruppert_average(
    state: &mut OnlineEmState,
    fa: &FaPrecision,
    t: usize,
    n: usize,
) -> Result<FaPrecision> {
    let half = n / 2;
    if t <= half {
        return Err(LrvgaError::InvalidParameter(format!(
            "averaging starts after step {half}, got step {t}"
        )));
    }
    let tt = (t - half) as f64;
    let avg = match state.averaged.take() {
        Some(prev) if tt > 1.0 => {
            check_dim(prev.dim(), fa.dim())?;
            check_dim(prev.rank(), fa.rank())?;
            let a = (tt - 1.0) / tt;
            FaPrecision {
                w: prev.w * a + &fa.w / tt,
                psi: prev.psi * a + &fa.psi / tt,
            }
        }
        _ => fa.clone(),
    };
    state.averaged = Some(avg.clone());
    Ok(avg)
}
