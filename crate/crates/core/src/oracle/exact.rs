//! Exact posterior for diagonal `H` under Gaussian noise, block by block.
//!
//! Written in covariance (Kalman) form so that it shares no algebra with the
//! information-form moments used by the EP code.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::forward::DegradationOperator;
use crate::gmm::AdaptedGmm;
use crate::partition::Partition;

#[derive(Clone, Debug)]
pub struct ExactBlockPosterior {
    pub weights: Vec<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct ExactPosterior {
    pub blocks: Vec<ExactBlockPosterior>,
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
}

fn select(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn select2(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn exact_diagonal_gaussian_posterior(
    y: &[f64],
    op: &DegradationOperator,
    sigma2: f64,
    gmm: &AdaptedGmm,
    part: &Partition,
) -> Result<ExactPosterior> {
    let h = op
        .diagonal()
        .ok_or_else(|| Error::invalid("exact posterior needs an identity or mask operator"))?;
    Error::check_len(part.pixel_count(), y.len())?;
    Error::check_len(part.patch_dim(), gmm.dim())?;
    let n = y.len();
    let mut mean = vec![0.0; n];
    let mut variances = vec![0.0; n];
    let mut blocks = Vec::with_capacity(part.num_blocks());
    for blk in part.blocks() {
        let r = blk.len();
        // observed positions within the block, with y/h as a direct noisy reading of x
        let obs: Vec<usize> = (0..r).filter(|&k| h[blk.indices[k]] != 0.0).collect();
        let y_obs = DVector::from_iterator(obs.len(), obs.iter().map(|&k| y[blk.indices[k]] / h[blk.indices[k]]));
        let noise = DMatrix::from_diagonal(&DVector::from_iterator(
            obs.len(),
            obs.iter().map(|&k| sigma2 / (h[blk.indices[k]] * h[blk.indices[k]])),
        ));
        let all: Vec<usize> = (0..r).collect();
        let mut logw = Vec::with_capacity(gmm.k());
        let mut comps = Vec::with_capacity(gmm.k());
        for ((w, mu), c) in gmm.weights().iter().zip(gmm.means()).zip(gmm.covs()) {
            let mu = select(mu, &blk.local);
            let c = select2(c, &blk.local, &blk.local);
            if obs.is_empty() {
                logw.push(w.ln());
                comps.push((mu, c));
                continue;
            }
            let s = select2(&c, &obs, &obs) + &noise;
            let ch = s.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?;
            let c_xo = select2(&c, &all, &obs);
            let resid = &y_obs - select(&mu, &obs);
            let alpha = ch.solve(&resid);
            let logdet: f64 = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            logw.push(w.ln() - 0.5 * (logdet + resid.dot(&alpha) + obs.len() as f64 * (2.0 * std::f64::consts::PI).ln()));
            let post_mean = &mu + &c_xo * alpha;
            let post_cov = &c - &c_xo * ch.solve(&c_xo.transpose());
            comps.push((post_mean, (&post_cov + post_cov.transpose()) * 0.5));
        }
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logw.iter().map(|l| (l - top).exp()).sum();
        let weights: Vec<f64> = logw.iter().map(|l| (l - top).exp() / z).collect();
        let mut m = DVector::zeros(r);
        for (w, (cm, _)) in weights.iter().zip(&comps) {
            m += cm * *w;
        }
        let mut cov = DMatrix::zeros(r, r);
        for (w, (cm, cc)) in weights.iter().zip(&comps) {
            let d = cm - &m;
            cov += (cc + &d * d.transpose()) * *w;
        }
        for (k, &i) in blk.indices.iter().enumerate() {
            mean[i] = m[k];
            variances[i] = cov[(k, k)];
        }
        blocks.push(ExactBlockPosterior { weights, mean: m, cov });
    }
    Ok(ExactPosterior {
        blocks,
        mean,
        variances,
    })
}
