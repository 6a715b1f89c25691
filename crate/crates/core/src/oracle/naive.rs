//! Classical EP with one full-covariance site per patch and dense `N × N` algebra.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::DegradationOperator;
use crate::gmm::AdaptedGmm;
use crate::partition::Partition;

use super::dense::DENSE_LIMIT;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct NaiveEpOptions {
    pub iterations: usize,
    pub damping: f64,
}

impl Default for NaiveEpOptions {
    fn default() -> Self {
        Self {
            iterations: 20,
            damping: 0.7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NaiveEpResult {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    pub cov: DMatrix<f64>,
    /// Site updates that were abandoned because no damped step kept the posterior proper.
    pub skipped_updates: usize,
    pub seconds: f64,
}

struct GmmBlock {
    log_w: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

impl GmmBlock {
    fn new(gmm: &AdaptedGmm, local: &[usize]) -> Self {
        Self {
            log_w: gmm.weights().iter().map(|w| w.ln()).collect(),
            means: gmm
                .means()
                .iter()
                .map(|m| DVector::from_iterator(local.len(), local.iter().map(|&i| m[i])))
                .collect(),
            covs: gmm
                .covs()
                .iter()
                .map(|c| DMatrix::from_fn(local.len(), local.len(), |i, j| c[(local[i], local[j])]))
                .collect(),
        }
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let w: Vec<f64> = self.log_w.iter().map(|l| l.exp()).collect();
        let r = self.means[0].len();
        let mut m = DVector::zeros(r);
        for (wk, mk) in w.iter().zip(&self.means) {
            m += mk * *wk;
        }
        let mut c = DMatrix::zeros(r, r);
        for ((wk, mk), ck) in w.iter().zip(&self.means).zip(&self.covs) {
            let d = mk - &m;
            c += (ck + &d * d.transpose()) * *wk;
        }
        (m, c)
    }

    /// Moments of the mixture times `N(m, s)`, in covariance form.
    fn tilted(&self, m: &DVector<f64>, s: &DMatrix<f64>) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let mut logs = Vec::new();
        let mut comps = Vec::new();
        for ((lw, mu), c) in self.log_w.iter().zip(&self.means).zip(&self.covs) {
            let ch = (c + s).cholesky()?;
            let d = m - mu;
            let a = ch.solve(&d);
            let logdet: f64 = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            logs.push(lw - 0.5 * (logdet + d.dot(&a)));
            let gain = ch.solve(c).transpose();
            comps.push((mu + &gain * &d, c - &gain * c));
        }
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - top).exp()).sum();
        let r = m.len();
        let mut mean = DVector::zeros(r);
        let w: Vec<f64> = logs.iter().map(|l| (l - top).exp() / z).collect();
        for (wk, (mk, _)) in w.iter().zip(&comps) {
            mean += mk * *wk;
        }
        let mut cov = DMatrix::zeros(r, r);
        for (wk, (mk, ck)) in w.iter().zip(&comps) {
            let d = mk - &mean;
            cov += (ck + &d * d.transpose()) * *wk;
        }
        Some((mean, (&cov + cov.transpose()) * 0.5))
    }
}

fn assemble(base: &DMatrix<f64>, part: &Partition, sites: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut q = base.clone();
    for (b, s) in part.blocks().iter().zip(sites) {
        for (i, &a) in b.indices.iter().enumerate() {
            for (j, &c) in b.indices.iter().enumerate() {
                q[(a, c)] += s[(i, j)];
            }
        }
    }
    q
}

fn assemble_vec(base: &DVector<f64>, part: &Partition, sites: &[DVector<f64>]) -> DVector<f64> {
    let mut v = base.clone();
    for (b, s) in part.blocks().iter().zip(sites) {
        for (i, &a) in b.indices.iter().enumerate() {
            v[a] += s[i];
        }
    }
    v
}

/// Sequential EP over the J patch factors with the Gaussian likelihood kept exact.
pub fn naive_full_ep(
    y: &[f64],
    op: &DegradationOperator,
    sigma2: f64,
    gmm: &AdaptedGmm,
    part: &Partition,
    opts: &NaiveEpOptions,
) -> Result<NaiveEpResult> {
    let start = Instant::now();
    let n = y.len();
    if n > DENSE_LIMIT {
        return Err(Error::invalid(format!("naive EP limited to {DENSE_LIMIT} pixels, got {n}")));
    }
    Error::check_len(part.pixel_count(), n)?;
    if !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::invalid("damping must lie in (0, 1]"));
    }
    let h = op.to_dense()?;
    let lik_prec = h.transpose() * &h / sigma2;
    let lik_info = h.transpose() * DVector::from_column_slice(y) / sigma2;
    let priors: Vec<GmmBlock> = part.blocks().iter().map(|b| GmmBlock::new(gmm, &b.local)).collect();

    let mut site_p = Vec::with_capacity(priors.len());
    let mut site_h = Vec::with_capacity(priors.len());
    for g in &priors {
        let (m, c) = g.moments();
        let p = c.try_inverse().ok_or_else(|| Error::NotPositiveDefinite("prior moment covariance".into()))?;
        site_h.push(&p * m);
        site_p.push(p);
    }

    let mut skipped = 0;
    for _ in 0..opts.iterations {
        for (j, blk) in part.blocks().iter().enumerate() {
            let q = assemble(&lik_prec, part, &site_p);
            let ch = q.cholesky().ok_or_else(|| Error::NotPositiveDefinite("naive EP posterior".into()))?;
            let mean = ch.solve(&assemble_vec(&lik_info, part, &site_h));
            let r = blk.len();
            let mut e = DMatrix::zeros(n, r);
            for (k, &a) in blk.indices.iter().enumerate() {
                e[(a, k)] = 1.0;
            }
            let cols = ch.solve(&e);
            let sjj = DMatrix::from_fn(r, r, |a, b| cols[(blk.indices[a], b)]);
            let mj = DVector::from_iterator(r, blk.indices.iter().map(|&a| mean[a]));
            let Some(sjj_inv) = sjj.clone().try_inverse() else {
                skipped += 1;
                continue;
            };
            let cav_p = &sjj_inv - &site_p[j];
            let cav_h = &sjj_inv * &mj - &site_h[j];
            let Some(cav_ch) = cav_p.clone().cholesky() else {
                skipped += 1;
                continue;
            };
            let cav_s = cav_ch.inverse();
            let cav_m = &cav_s * &cav_h;
            let Some((tm, tc)) = priors[j].tilted(&cav_m, &cav_s) else {
                skipped += 1;
                continue;
            };
            let Some(tc_inv) = tc.try_inverse() else {
                skipped += 1;
                continue;
            };
            let new_p = &tc_inv - &cav_p;
            let new_h = &tc_inv * &tm - &cav_h;
            let mut eps = opts.damping;
            let mut accepted = false;
            for _ in 0..20 {
                let p = &new_p * eps + &site_p[j] * (1.0 - eps);
                let mut trial = site_p.clone();
                trial[j] = (&p + p.transpose()) * 0.5;
                if assemble(&lik_prec, part, &trial).cholesky().is_some() {
                    site_h[j] = &new_h * eps + &site_h[j] * (1.0 - eps);
                    site_p[j] = trial.swap_remove(j);
                    accepted = true;
                    break;
                }
                eps *= 0.5;
            }
            if !accepted {
                skipped += 1;
            }
        }
    }
    let q = assemble(&lik_prec, part, &site_p);
    let ch = q.cholesky().ok_or_else(|| Error::NotPositiveDefinite("naive EP posterior".into()))?;
    let mean = ch.solve(&assemble_vec(&lik_info, part, &site_h));
    let cov = ch.inverse();
    Ok(NaiveEpResult {
        mean: mean.iter().copied().collect(),
        variances: cov.diagonal().iter().copied().collect(),
        cov,
        skipped_updates: skipped,
        seconds: start.elapsed().as_secs_f64(),
    })
}
