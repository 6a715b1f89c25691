//! Gaussian vectors whose covariance is diagonal, block-diagonal or isotropic.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::partition::Partition;

#[derive(Clone, Debug)]
pub enum StructuredMatrix {
    Diagonal(Vec<f64>),
    BlockDiagonal {
        partition: Arc<Partition>,
        blocks: Vec<DMatrix<f64>>,
    },
    Isotropic {
        dim: usize,
        value: f64,
    },
}

impl StructuredMatrix {
    pub fn dim(&self) -> usize {
        match self {
            StructuredMatrix::Diagonal(v) => v.len(),
            StructuredMatrix::BlockDiagonal { partition, .. } => partition.pixel_count(),
            StructuredMatrix::Isotropic { dim, .. } => *dim,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            StructuredMatrix::Diagonal(_) => "diagonal",
            StructuredMatrix::BlockDiagonal { .. } => "block-diagonal",
            StructuredMatrix::Isotropic { .. } => "isotropic",
        }
    }

    /// Checks positivity of variances and positive definiteness of blocks.
    pub fn validate(&self) -> Result<()> {
        match self {
            StructuredMatrix::Diagonal(v) => {
                if let Some(i) = v.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
                    return Err(Error::invalid(format!("variance {} at index {i} is not positive", v[i])));
                }
            }
            StructuredMatrix::Isotropic { dim, value } => {
                if *dim == 0 || !(*value > 0.0 && value.is_finite()) {
                    return Err(Error::invalid("isotropic variance must be positive"));
                }
            }
            StructuredMatrix::BlockDiagonal { partition, blocks } => {
                Error::check_len(partition.num_blocks(), blocks.len())?;
                for (j, (b, m)) in partition.blocks().iter().zip(blocks).enumerate() {
                    if m.nrows() != b.len() || m.ncols() != b.len() {
                        return Err(Error::DimensionMismatch {
                            expected: b.len(),
                            got: m.nrows(),
                        });
                    }
                    let asym = (m - m.transpose()).abs().max();
                    if asym > 1e-12 * m.abs().max().max(1.0) {
                        return Err(Error::invalid(format!("block {j} is not symmetric")));
                    }
                    if !linalg::is_spd(m) {
                        return Err(Error::NotPositiveDefinite(format!("block {j}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Diagonal entries in pixel order.
    pub fn diagonal(&self) -> Vec<f64> {
        match self {
            StructuredMatrix::Diagonal(v) => v.clone(),
            StructuredMatrix::Isotropic { dim, value } => vec![*value; *dim],
            StructuredMatrix::BlockDiagonal { partition, blocks } => {
                let mut out = vec![0.0; partition.pixel_count()];
                for (b, m) in partition.blocks().iter().zip(blocks) {
                    for (k, &i) in b.indices.iter().enumerate() {
                        out[i] = m[(k, k)];
                    }
                }
                out
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_len(self.dim(), x.len())?;
        Ok(match self {
            StructuredMatrix::Diagonal(v) => v.iter().zip(x).map(|(a, b)| a * b).collect(),
            StructuredMatrix::Isotropic { value, .. } => x.iter().map(|b| value * b).collect(),
            StructuredMatrix::BlockDiagonal { partition, blocks } => {
                let mut out = vec![0.0; x.len()];
                for (b, m) in partition.blocks().iter().zip(blocks) {
                    for (r, &i) in b.indices.iter().enumerate() {
                        out[i] = b.indices.iter().enumerate().map(|(c, &k)| m[(r, c)] * x[k]).sum();
                    }
                }
                out
            }
        })
    }

    /// Structure-preserving inverse.
    pub fn inverse(&self) -> Result<Self> {
        Ok(match self {
            StructuredMatrix::Diagonal(v) => StructuredMatrix::Diagonal(v.iter().map(|x| 1.0 / x).collect()),
            StructuredMatrix::Isotropic { dim, value } => StructuredMatrix::Isotropic {
                dim: *dim,
                value: 1.0 / value,
            },
            StructuredMatrix::BlockDiagonal { partition, blocks } => StructuredMatrix::BlockDiagonal {
                partition: partition.clone(),
                blocks: blocks.iter().map(linalg::spd_inverse).collect::<Result<_>>()?,
            },
        })
    }
}

/// Mean vector plus structured covariance; every EP factor is one of these.
#[derive(Clone, Debug)]
pub struct StructuredGaussian {
    mean: Vec<f64>,
    cov: StructuredMatrix,
}

impl StructuredGaussian {
    pub fn new(mean: Vec<f64>, cov: StructuredMatrix) -> Result<Self> {
        Error::check_len(cov.dim(), mean.len())?;
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::invalid("mean must be finite"));
        }
        cov.validate()?;
        Ok(Self { mean, cov })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &StructuredMatrix {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn marginal_variances(&self) -> Vec<f64> {
        marginal_variances(self)
    }
}

pub fn marginal_variances(g: &StructuredGaussian) -> Vec<f64> {
    g.cov.diagonal()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marginals_per_structure() {
        let iso = StructuredGaussian::new(vec![0.0; 3], StructuredMatrix::Isotropic { dim: 3, value: 2.0 }).unwrap();
        assert_eq!(iso.marginal_variances(), vec![2.0; 3]);

        let diag = StructuredGaussian::new(vec![0.0; 3], StructuredMatrix::Diagonal(vec![1.0, 4.0, 9.0])).unwrap();
        assert_eq!(diag.marginal_variances(), vec![1.0, 4.0, 9.0]);

        let p2 = Arc::new(Partition::new(2, 2, 2, (0, 0)).unwrap());
        let block = DMatrix::from_row_slice(4, 4, &[2.0, 1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
        let bd = StructuredGaussian::new(
            vec![0.0; 4],
            StructuredMatrix::BlockDiagonal {
                partition: p2,
                blocks: vec![block],
            },
        )
        .unwrap();
        assert_eq!(bd.marginal_variances(), vec![2.0; 4]);
    }

    #[test]
    fn rejects_invalid_covariances() {
        assert!(StructuredGaussian::new(vec![0.0; 2], StructuredMatrix::Diagonal(vec![1.0, 0.0])).is_err());
        assert!(StructuredGaussian::new(vec![0.0], StructuredMatrix::Isotropic { dim: 1, value: -1.0 }).is_err());
        let p = Arc::new(Partition::new(2, 2, 2, (0, 0)).unwrap());
        let bad = DMatrix::from_row_slice(4, 4, &[1.0, 2.0, 0.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(StructuredGaussian::new(
            vec![0.0; 4],
            StructuredMatrix::BlockDiagonal {
                partition: p,
                blocks: vec![bad]
            }
        )
        .is_err());
    }
}
