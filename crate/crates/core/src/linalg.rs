//! Small dense linear algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FmmError, Result};

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let vectors = DMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Clips negative eigenvalues at zero.
pub fn psd_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen_desc(m);
    let clipped = values.map(|v| v.max(0.0));
    symmetrize(&(&vectors * DMatrix::from_diagonal(&clipped) * vectors.transpose()))
}

/// Factor `F` with `F F^T = m` for a symmetric PSD matrix (negative
/// eigenvalues treated as zero).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (values, vectors) = sym_eigen_desc(m);
    let roots = values.map(|v| v.max(0.0).sqrt());
    vectors * DMatrix::from_diagonal(&roots)
}

/// Reciprocal 2-norm condition number of a symmetric matrix.
pub fn sym_rcond(m: &DMatrix<f64>) -> f64 {
    let (values, _) = sym_eigen_desc(m);
    let max = values.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let min = values.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if max == 0.0 {
        0.0
    } else {
        min / max
    }
}

/// Inverse of a symmetric positive definite matrix with a conditioning guard.
pub fn spd_inverse(m: &DMatrix<f64>, min_rcond: f64) -> Result<DMatrix<f64>> {
    let rcond = sym_rcond(m);
    if !(rcond >= min_rcond) {
        return Err(FmmError::IllConditioned {
            condition: 1.0 / rcond,
        });
    }
    let chol = m.clone().cholesky().ok_or(FmmError::IllConditioned {
        condition: 1.0 / rcond,
    })?;
    Ok(symmetrize(&chol.inverse()))
}

pub fn trace(m: &DMatrix<f64>) -> f64 {
    m.diagonal().sum()
}

/// Empirical quantile with linear interpolation between order statistics
/// (the `type 7` rule).
pub fn quantile(values: &[f64], prob: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty sample");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0]);
        let (v, _) = sym_eigen_desc(&m);
        assert_eq!(v.as_slice(), &[5.0, 3.0, 1.0]);
    }

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert!((quantile(&v, 0.95) - 4.8).abs() < 1e-12);
        assert_eq!(quantile(&v, 1.0), 5.0);
    }

    #[test]
    fn psd_projection_clips() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = psd_project(&m);
        let (v, _) = sym_eigen_desc(&p);
        assert!(v.iter().all(|&x| x >= -1e-12));
        assert!((v[0] - 3.0).abs() < 1e-12);
    }
}
