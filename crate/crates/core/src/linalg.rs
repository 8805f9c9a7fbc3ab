//! Symmetric positive-definite helpers for the covariance-based loss.

use nalgebra::DMatrix;
use ndarray::Array2;

/// `(ln det A, A⁻¹)` via a Cholesky factorization, or `None` if `A` is not
/// numerically positive definite.
pub fn spd_log_det_inverse(a: &Array2<f64>) -> Option<(f64, Array2<f64>)> {
    let (n, m) = a.dim();
    let chol = DMatrix::from_fn(n, m, |i, j| a[[i, j]]).cholesky()?;
    let l = chol.l_dirty();
    let log_det = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
    if !log_det.is_finite() {
        return None;
    }
    let inv = chol.inverse();
    Some((log_det, Array2::from_shape_fn((n, n), |(i, j)| inv[(i, j)])))
}
