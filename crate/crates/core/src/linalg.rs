//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ratio of largest to smallest singular value; `inf` for an exactly
/// singular matrix.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().copied().fold(0.0_f64, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `m x = b` by LU, failing when the condition number exceeds `max_cond`.
pub fn solve_checked(
    m: &DMatrix<f64>,
    b: &DVector<f64>,
    max_cond: f64,
    what: &str,
) -> Result<(DVector<f64>, f64)> {
    let cond = condition_number(m);
    if !cond.is_finite() || cond > max_cond {
        return Err(Error::Singular(format!(
            "{what}: condition number {cond:.3e} exceeds {max_cond:.0e}"
        )));
    }
    let x = m
        .clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular(format!("{what}: LU solve failed")))?;
    Ok((x, cond))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    m.clone().cholesky().map(|c| c.inverse())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// True when `m` equals its transpose up to `rel_tol` times its largest entry.
pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    (m - m.transpose()).amax() <= rel_tol * scale
}

/// `m^{-1/2}` for symmetric positive definite `m`, by eigendecomposition.
pub fn spd_inverse_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = symmetrize(m).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return None;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Some(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Sample mean of each column.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Covariance with divisor `n` (maximum-likelihood form).
pub fn ml_covariance(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mean = column_means(m);
    let mut centered = m.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    let cov = centered.transpose() * &centered / m.nrows() as f64;
    (cov, mean)
}

/// Sine of the angle between two vectors; 0 when either is zero.
pub fn sin_angle(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let resid = a - b * (a.dot(b) / (nb * nb));
    (resid.norm() / na).min(1.0)
}
