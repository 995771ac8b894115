//! Small dense linear-algebra helpers shared by the model modules.
//!
//! Everything here operates on `f64` dynamic matrices. Eigen routines fix
//! ordering (descending eigenvalues) and sign (largest-magnitude component
//! of each eigenvector made positive) so that fits are reproducible.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Cholesky factorization that reports failure as a [`Error::Singular`].
pub fn spd_cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(spd_cholesky(m, what)?.inverse())
}

/// `log det` of a symmetric positive-definite matrix via Cholesky.
pub fn spd_log_det(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let chol = spd_cholesky(m, what)?;
    Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Flips each column so its largest-magnitude entry is positive.
///
/// Ties resolve to the first maximal index, which keeps the convention
/// deterministic for symmetric inputs.
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0usize;
        let mut best_abs = f64::NEG_INFINITY;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted descending and
/// eigenvector signs fixed. Returns `(eigenvalues, eigenvectors)` with
/// eigenvectors as columns.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = symmetrize(m).symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("eigenvalues are finite")
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    fix_column_signs(&mut vectors);
    (values, vectors)
}

/// Solves the symmetric-definite generalized eigenproblem `B v = λ W v`.
///
/// `W` must be positive definite. Returns eigenvalues sorted descending and
/// eigenvectors as columns normalized so that `vᵀ W v = 1` (W-orthonormal),
/// signs fixed as in [`sym_eigen_desc`].
pub fn generalized_eigen_desc(
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
    what: &str,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let chol = spd_cholesky(w, what)?;
    let l = chol.l();
    // M = L⁻¹ B L⁻ᵀ, reduced to a standard symmetric problem.
    let t1 = l
        .solve_lower_triangular(b)
        .ok_or_else(|| Error::Singular(format!("{what}: triangular solve failed")))?;
    let t2 = l
        .solve_lower_triangular(&t1.transpose())
        .ok_or_else(|| Error::Singular(format!("{what}: triangular solve failed")))?;
    let m = t2.transpose();
    let (values, u) = sym_eigen_desc(&m);
    // Back-substitute: v = L⁻ᵀ u.
    let mut vectors = l
        .transpose()
        .solve_upper_triangular(&u)
        .ok_or_else(|| Error::Singular(format!("{what}: triangular solve failed")))?;
    fix_column_signs(&mut vectors);
    Ok((values, vectors))
}

/// `xᵀ M y`.
pub fn quad_form(x: &DVector<f64>, m: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    x.dot(&(m * y))
}
