//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

/// Tolerance for "PSD up to round-off": eigenvalues down to
/// `-PSD_TOL * max(1, max|a_ij|)` are accepted.
pub const PSD_TOL: f64 = 1e-10;

pub fn psd_threshold(a: &DMatrix<f64>) -> f64 {
    -PSD_TOL * a.amax().max(1.0)
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(a.clone()).eigenvalues.min()
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    a.is_square()
        && (0..a.nrows()).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= tol))
}

/// Writes a lower-triangular `l` with `l lᵀ = a` into `out` (row-major,
/// `m×m`). Returns false when `a` is not numerically positive definite.
pub fn cholesky_into(a: &[f64], m: usize, out: &mut [f64]) -> bool {
    out.iter_mut().for_each(|x| *x = 0.0);
    for i in 0..m {
        for j in 0..=i {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= out[i * m + k] * out[j * m + k];
            }
            if i == j {
                if s <= 1e-14 * a[i * m + i].abs().max(f64::MIN_POSITIVE) {
                    return false;
                }
                out[i * m + i] = s.sqrt();
            } else {
                out[i * m + j] = s / out[j * m + j];
            }
        }
    }
    true
}

/// Symmetric square root with negative eigenvalues clipped to zero.
/// Returns `Err(min_eigenvalue)` if an eigenvalue falls below the PSD
/// tolerance.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>, f64> {
    let threshold = psd_threshold(a);
    let eig = SymmetricEigen::new(a.clone());
    let min = eig.eigenvalues.min();
    if min < threshold {
        return Err(min);
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}
