//! Dense linear-Gaussian references for small images.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::forward::DegradationOperator;
use crate::partition::Partition;

pub const DENSE_LIMIT: usize = 1024;

#[derive(Clone, Debug)]
pub struct DenseMoments {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

impl DenseMoments {
    /// Diagonal blocks of the covariance aligned with `part`.
    pub fn blocks(&self, part: &Partition) -> Vec<DMatrix<f64>> {
        part.blocks()
            .iter()
            .map(|b| DMatrix::from_fn(b.len(), b.len(), |i, j| self.cov[(b.indices[i], b.indices[j])]))
            .collect()
    }

    pub fn variances(&self) -> Vec<f64> {
        self.cov.diagonal().iter().copied().collect()
    }
}

/// Mean `Q⁻¹ rhs` and covariance `Q⁻¹` for `Q = Hᵀ diag(weights) H + Ω0`.
pub fn dense_reference_moments(
    op: &DegradationOperator,
    weights: &[f64],
    prior_precision: &DMatrix<f64>,
    rhs: &[f64],
) -> Result<DenseMoments> {
    let n = op.len();
    if n > DENSE_LIMIT {
        return Err(Error::invalid(format!("dense reference limited to {DENSE_LIMIT} pixels, got {n}")));
    }
    Error::check_len(n, weights.len())?;
    Error::check_len(n, rhs.len())?;
    Error::check_len(n, prior_precision.nrows())?;
    let h = op.to_dense()?;
    let q = h.transpose() * DMatrix::from_diagonal(&DVector::from_column_slice(weights)) * &h + prior_precision;
    let ch = q
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("dense posterior precision".into()))?;
    let mean = ch.solve(&DVector::from_column_slice(rhs));
    let cov = ch.inverse();
    Ok(DenseMoments {
        mean: mean.iter().copied().collect(),
        cov: (&cov + cov.transpose()) * 0.5,
    })
}

/// Embeds per-block matrices into a dense `N × N` matrix.
pub fn embed_blocks(part: &Partition, blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n = part.pixel_count();
    let mut out = DMatrix::zeros(n, n);
    for (b, m) in part.blocks().iter().zip(blocks) {
        for (i, &a) in b.indices.iter().enumerate() {
            for (j, &c) in b.indices.iter().enumerate() {
                out[(a, c)] = m[(i, j)];
            }
        }
    }
    out
}
