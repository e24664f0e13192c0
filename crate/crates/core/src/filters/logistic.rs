use nalgebra::DVector;

use super::{check_divergence, GaussianBelief};
use crate::error::{check_dim, LrvgaError, Result};
use crate::fa::{recursive_em_update, RecursionWeights};
use crate::observation::Observation;

/// `√(8/π)`, the slope matching the probit approximation of the sigmoid at 0.
pub const PROBIT_BETA: f64 = 1.595_769_121_605_730_7;

/// Tolerance of the scalar solve.
pub const GLM_TOL: f64 = 1e-10;
/// Newton iteration cap of the scalar solve.
pub const GLM_MAX_ITER: usize = 50;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s)
}

/// `k(ν) = β / √(ν + β²)`, so that `E[σ(a)] ≈ σ(k(ν) μ_a)` for `a ~ N(μ_a, ν)`.
pub fn probit_scale(nu: f64) -> f64 {
    PROBIT_BETA / (nu + PROBIT_BETA * PROBIT_BETA).sqrt()
}

/// Solution of the coupled scalar system of the logistic update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlmScalarSolution {
    /// Posterior mean of `xᵀθ`.
    pub a: f64,
    /// Posterior variance of `xᵀθ`.
    pub nu: f64,
    /// `k(ν)`.
    pub k: f64,
    pub iterations: usize,
    /// Max-norm of the residual at the returned point.
    pub residual: f64,
    /// Whether the residual met the tolerance.
    pub converged: bool,
}

impl GlmScalarSolution {
    /// The curvature `k σ'(k a)` absorbed into the precision.
    pub fn curvature(&self) -> f64 {
        self.k * sigmoid_prime(self.k * self.a)
    }

    /// The residual `y − σ(k a)` driving the mean update.
    pub fn innovation(&self, y: f64) -> f64 {
        y - sigmoid(self.k * self.a)
    }
}

struct System {
    a0: f64,
    nu0: f64,
    y: f64,
}

impl System {
    fn residual(&self, a: f64, nu: f64) -> (f64, f64) {
        let k = probit_scale(nu);
        let z = k * a;
        let s = k * sigmoid_prime(z);
        (
            a - self.a0 - self.nu0 * (self.y - sigmoid(z)),
            nu - self.nu0 / (1.0 + s * self.nu0),
        )
    }

    fn jacobian(&self, a: f64, nu: f64) -> [[f64; 2]; 2] {
        let k = probit_scale(nu);
        let dk = -k / (2.0 * (nu + PROBIT_BETA * PROBIT_BETA));
        let z = k * a;
        let sg = sigmoid(z);
        let d1 = sg * (1.0 - sg);
        let d2 = d1 * (1.0 - 2.0 * sg);
        let s = k * d1;
        let ds_da = k * k * d2;
        let ds_dnu = dk * (d1 + k * a * d2);
        let denom = 1.0 + s * self.nu0;
        let dr2_ds = self.nu0 * self.nu0 / (denom * denom);
        [
            [1.0 + self.nu0 * d1 * k, self.nu0 * d1 * a * dk],
            [dr2_ds * ds_da, 1.0 + dr2_ds * ds_dnu],
        ]
    }

    fn clamp(&self, a: f64, nu: f64) -> (f64, f64) {
        (
            a.clamp(self.a0 - self.nu0, self.a0 + self.nu0),
            nu.clamp(0.0, self.nu0),
        )
    }

    fn norm(r: (f64, f64)) -> f64 {
        r.0.abs().max(r.1.abs())
    }

    fn merit(r: (f64, f64)) -> f64 {
        r.0 * r.0 + r.1 * r.1
    }

    /// The unique root in `a` of the first equation at fixed `ν`; the
    /// residual is increasing in `a`, so a safeguarded Newton iteration on the
    /// bracket `[a₀ − ν₀, a₀ + ν₀]` converges.
    fn solve_a(&self, nu: f64) -> f64 {
        let k = probit_scale(nu);
        let f = |a: f64| a - self.a0 - self.nu0 * (self.y - sigmoid(k * a));
        let (mut lo, mut hi) = (self.a0 - self.nu0, self.a0 + self.nu0);
        let mut a = self.a0;
        for _ in 0..200 {
            let fa = f(a);
            if fa == 0.0 {
                break;
            }
            if fa > 0.0 {
                hi = a;
            } else {
                lo = a;
            }
            let newton = a - fa / (1.0 + self.nu0 * k * sigmoid_prime(k * a));
            a = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * (1.0 + a.abs()) {
                break;
            }
        }
        a
    }

    /// Reduces the system to `g(ν) = ν − ν₀ / (1 + s(a(ν), ν) ν₀)`, which is
    /// negative at `0` and nonnegative at `ν₀`, and bisects.
    fn solve_bracketed(&self) -> (f64, f64) {
        let g = |nu: f64| {
            let a = self.solve_a(nu);
            let k = probit_scale(nu);
            nu - self.nu0 / (1.0 + k * sigmoid_prime(k * a) * self.nu0)
        };
        let (mut lo, mut hi) = (0.0, self.nu0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let nu = 0.5 * (lo + hi);
        (self.solve_a(nu), nu)
    }
}

/// Solves `a = a₀ + ν₀ (y − σ(k a))`, `ν = ν₀ / (1 + k σ'(k a) ν₀)` with
/// `k = k(ν)` by damped Newton. When Newton stalls the system is reduced to a
/// bracketed one-dimensional root in `ν`.
///
/// The tolerance is scaled by `1 + |a₀| + ν₀`.
pub fn solve_glm_scalar_system(
    a0: f64,
    nu0: f64,
    y: f64,
    tol: f64,
    max_iter: usize,
) -> Result<GlmScalarSolution> {
    if !a0.is_finite() || !nu0.is_finite() || nu0 < 0.0 {
        return Err(LrvgaError::InvalidParameter(format!(
            "scalar system needs finite a0 and nu0 >= 0, got a0={a0}, nu0={nu0}"
        )));
    }
    if !(0.0..=1.0).contains(&y) {
        return Err(LrvgaError::InvalidParameter(format!(
            "logistic label must lie in [0, 1], got {y}"
        )));
    }
    let sys = System { a0, nu0, y };
    let scaled_tol = tol * (1.0 + a0.abs() + nu0);
    let (mut a, mut nu) = (a0, nu0);
    let mut r = sys.residual(a, nu);
    let mut iterations = 0;
    while System::norm(r) > scaled_tol && iterations < max_iter {
        iterations += 1;
        let j = sys.jacobian(a, nu);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if !det.is_finite() || det.abs() < 1e-300 {
            break;
        }
        let da = (j[1][1] * r.0 - j[0][1] * r.1) / det;
        let dnu = (j[0][0] * r.1 - j[1][0] * r.0) / det;
        let current = System::merit(r);
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-10 {
            let (ta, tnu) = sys.clamp(a - step * da, nu - step * dnu);
            let tr = sys.residual(ta, tnu);
            if System::merit(tr) < current {
                a = ta;
                nu = tnu;
                r = tr;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let mut converged = System::norm(r) <= scaled_tol;
    if !converged {
        log::debug!(
            "scalar Newton solve stalled at residual {:e}; using bracketed fallback",
            System::norm(r)
        );
        (a, nu) = sys.solve_bracketed();
        r = sys.residual(a, nu);
        converged = System::norm(r) <= scaled_tol;
    }
    Ok(GlmScalarSolution {
        a,
        nu,
        k: probit_scale(nu),
        iterations,
        residual: System::norm(r),
        converged,
    })
}

fn scalars_with_gain(
    belief: &GaussianBelief,
    obs: &Observation,
    tol: f64,
    max_iter: usize,
) -> Result<(GlmScalarSolution, DVector<f64>)> {
    check_dim(belief.dim(), obs.dim())?;
    let y = obs.label()?;
    let px = belief.prec.woodbury_apply(&obs.x.to_dense())?;
    let nu0 = obs.x.dot(&px);
    let a0 = obs.x.dot(&belief.mu);
    Ok((solve_glm_scalar_system(a0, nu0, y, tol, max_iter)?, px))
}

/// The scalar solve at the prior predictive `a₀ = xᵀμ`, `ν₀ = xᵀ P x`.
pub fn solve_glm_scalars(
    belief: &GaussianBelief,
    obs: &Observation,
    tol: f64,
    max_iter: usize,
) -> Result<GlmScalarSolution> {
    scalars_with_gain(belief, obs, tol, max_iter).map(|(s, _)| s)
}

/// Limited-memory logistic update with the probit-approximated expectations.
///
/// The precision absorbs the rank-one block `x √(k σ'(k a))`; the mean moves
/// along `P_{t-1} x`, the direction fixed by the scalar solve.
pub fn lrvga_logistic_step(
    belief: &GaussianBelief,
    obs: &Observation,
    inner_loops: usize,
) -> Result<GaussianBelief> {
    check_dim(belief.dim(), obs.dim())?;
    if obs.x.is_zero() {
        obs.label()?;
        return Ok(belief.clone());
    }
    let y = obs.label()?;
    let (sol, px) = scalars_with_gain(belief, obs, GLM_TOL, GLM_MAX_ITER)?;
    if !sol.converged {
        log::warn!("scalar solve residual {:e} above tolerance", sol.residual);
    }
    let block = obs.x.scaled_column(sol.curvature().sqrt());
    let outcome = recursive_em_update(
        &belief.prec,
        &block,
        RecursionWeights::accumulate(),
        inner_loops,
    )?;
    let next = GaussianBelief {
        mu: &belief.mu + px * sol.innovation(y),
        prec: outcome.fa,
    };
    check_divergence(&next, outcome.clamped)?;
    Ok(next)
}
