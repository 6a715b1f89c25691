//! Small dense linear-algebra helpers shared by the per-block computations.
//!
//! Every r×r inversion in the crate goes through [`factor_spd`], which adds a
//! single jitter of `1e-10 * trace / r` when the plain Cholesky factorization
//! fails and reports an error if the jittered matrix still does not factor.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative jitter applied once when a symmetric factorization fails.
pub const JITTER_SCALE: f64 = 1e-10;

/// Cholesky factorization without any regularization.
pub fn try_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if m.nrows() != m.ncols() || m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Cholesky::new(m.clone())
}

/// `true` when `m` is symmetric positive definite (checked by factorization).
pub fn is_spd(m: &DMatrix<f64>) -> bool {
    try_cholesky(m).is_some()
}

/// Cholesky factorization with a single jitter retry.
pub fn factor_spd(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = try_cholesky(m) {
        return Ok(c);
    }
    let n = m.nrows();
    if n == 0 || n != m.ncols() {
        return Err(Error::NotPositiveDefinite(format!(
            "{}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    let trace = m.trace();
    let jitter = JITTER_SCALE * (trace / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jittered = m.clone();
    for i in 0..n {
        jittered[(i, i)] += jitter;
    }
    try_cholesky(&jittered).ok_or_else(|| {
        Error::NotPositiveDefinite(format!("{n}x{n} block failed after jitter {jitter:e}"))
    })
}

/// log-determinant from a Cholesky factor.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    let l = c.l_dirty();
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
}

/// Inverse of an SPD matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut inv = factor_spd(m)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Symmetrizes and clips eigenvalues below `floor`.
pub fn psd_project(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s.clone());
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return s;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(floor));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// Frobenius inner product ⟨a, b⟩ = tr(aᵀ b).
pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_semidefinite_matrix() {
        // rank-one 11ᵀ is PSD but singular
        let m = DMatrix::from_element(3, 3, 1.0);
        assert!(try_cholesky(&m).is_none());
        assert!(factor_spd(&m).is_ok());
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(factor_spd(&m), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn logdet_matches_product_of_diagonal() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0]);
        let c = factor_spd(&m).unwrap();
        assert!((chol_logdet(&c) - 36f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn projection_clips_negative_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = psd_project(&m, 1e-10);
        let eig = SymmetricEigen::new(p).eigenvalues;
        assert!(eig.iter().all(|&l| l >= 1e-10 - 1e-14));
    }
}
