//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::DMatrix;

/// Numerical rank from singular values, relative tolerance against the
/// largest singular value.
pub fn numerical_rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 || !max.is_finite() {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Default tolerance used for rank decisions: `max(m, n) · ε · 10`.
pub fn default_rank_tol(a: &DMatrix<f64>) -> f64 {
    (a.nrows().max(a.ncols()) as f64) * f64::EPSILON * 10.0
}

/// Moore–Penrose pseudo-inverse.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let tol = default_rank_tol(a);
    let svd = a.clone().svd(true, true);
    let max = svd.singular_values.iter().cloned().fold(0.0_f64, f64::max);
    svd.pseudo_inverse(tol * max.max(f64::MIN_POSITIVE))
        .unwrap_or_else(|_| DMatrix::zeros(a.ncols(), a.nrows()))
}

/// Sign and log-absolute value of the determinant of a square matrix.
pub fn sign_log_det(a: &DMatrix<f64>) -> (f64, f64) {
    let lu = a.clone().lu();
    let u = lu.u();
    let mut sign = if lu.p().determinant::<f64>() < 0.0 { -1.0 } else { 1.0 };
    let mut log_abs = 0.0;
    for i in 0..u.nrows() {
        let d = u[(i, i)];
        if d == 0.0 {
            return (0.0, f64::NEG_INFINITY);
        }
        if d < 0.0 {
            sign = -sign;
        }
        log_abs += d.abs().ln();
    }
    (sign, log_abs)
}

/// Mean and (population) variance of a slice.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Pearson correlation; 0 when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    let n = a.len() as f64;
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / n;
    (cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0)
}

/// Column `j` of a matrix as a Vec.
pub fn column(a: &DMatrix<f64>, j: usize) -> Vec<f64> {
    a.column(j).iter().cloned().collect()
}
