//! Small dense helpers for the p×p systems that appear in every Woodbury solve.

use nalgebra::{DMatrix, DVector};

/// Solves `a · x = b` for a symmetric positive-definite `a`.
///
/// Falls back to the pseudo-inverse when the Cholesky factorization fails.
pub(crate) fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    match a.clone().cholesky() {
        Some(chol) => chol.solve(b),
        None => {
            log::warn!(
                "Cholesky factorization of a {}x{} system failed; using pseudo-inverse",
                a.nrows(),
                a.ncols()
            );
            pseudo_inverse(a) * b
        }
    }
}

/// Returns `b · a⁻¹` for a symmetric positive-definite `a`.
pub(crate) fn spd_right_solve(b: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    spd_solve(a, &b.transpose()).transpose()
}

pub(crate) fn spd_solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    match a.clone().cholesky() {
        Some(chol) => chol.solve(b),
        None => {
            log::warn!("Cholesky factorization failed; using pseudo-inverse");
            pseudo_inverse(a) * b
        }
    }
}

/// Log-determinant of a symmetric positive-definite matrix, `None` if the
/// factorization fails.
pub(crate) fn spd_log_det(a: &DMatrix<f64>) -> Option<f64> {
    let chol = a.clone().cholesky()?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let tol = f64::EPSILON * a.nrows().max(a.ncols()) as f64 * svd.singular_values.max();
    svd.pseudo_inverse(tol)
        .unwrap_or_else(|_| DMatrix::zeros(a.ncols(), a.nrows()))
}

/// Row-wise sum of elementwise products, i.e. `diag(x yᵀ)`, with no `d×d` intermediate.
pub(crate) fn row_dot(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(x.nrows());
    for (xc, yc) in x.column_iter().zip(y.column_iter()) {
        for ((o, a), b) in out.iter_mut().zip(xc.iter()).zip(yc.iter()) {
            *o += a * b;
        }
    }
    out
}

/// Divides each row `i` of `m` by `diag[i]`.
pub(crate) fn div_rows(m: &DMatrix<f64>, diag: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        col.component_div_assign(diag);
    }
    out
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
