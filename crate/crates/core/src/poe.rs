//! Product-of-experts fusion of per-partition marginals.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gmm::Theta;

#[derive(Clone, Debug, Serialize)]
pub struct ExpertResult {
    pub partition: usize,
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    pub theta: Theta,
    #[serde(skip)]
    pub weights: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusedPosterior {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
}

/// Fused precision is the average expert precision; the fused mean is the precision-weighted average.
pub fn fuse_poe(experts: &[ExpertResult]) -> Result<FusedPosterior> {
    let first = experts.first().ok_or_else(|| Error::invalid("fusion needs at least one expert"))?;
    let n = first.mean.len();
    for e in experts {
        Error::check_len(n, e.mean.len())?;
        Error::check_len(n, e.variances.len())?;
        if e.variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("expert {} has a non-positive variance", e.partition)));
        }
    }
    if let [only] = experts {
        return Ok(FusedPosterior {
            mean: only.mean.clone(),
            variances: only.variances.clone(),
        });
    }
    let r = experts.len() as f64;
    let mut mean = vec![0.0; n];
    let mut variances = vec![0.0; n];
    for i in 0..n {
        let (mut p, mut h) = (0.0, 0.0);
        for e in experts {
            p += 1.0 / e.variances[i];
            h += e.mean[i] / e.variances[i];
        }
        let v = r / p;
        variances[i] = v;
        mean[i] = v * h / r;
    }
    Ok(FusedPosterior { mean, variances })
}
