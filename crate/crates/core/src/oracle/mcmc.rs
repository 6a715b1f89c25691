//! Single-site random-walk Metropolis on the exact posterior
//! `p(x | y) ∝ Π_j GMM(x_j) Π_n p(y_n | (Hx)_n)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::DegradationOperator;
use crate::gmm::AdaptedGmm;
use crate::partition::Partition;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum McmcLikelihood {
    /// `y_n ~ Poisson(max((Hx)_n, 0))`.
    Poisson,
    Gaussian { variance: f64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcOptions {
    pub sweeps: usize,
    pub burn_in: usize,
    pub batches: usize,
    pub seed: u64,
    pub likelihood: McmcLikelihood,
}

impl Default for McmcOptions {
    fn default() -> Self {
        Self {
            sweeps: 1_000_000,
            burn_in: 20_000,
            batches: 100,
            seed: 0,
            likelihood: McmcLikelihood::Poisson,
        }
    }
}

#[derive(Clone, Debug)]
pub struct McmcResult {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    /// Batch-means standard errors of `mean`.
    pub std_errors: Vec<f64>,
    pub acceptance: f64,
}

struct BlockPrior {
    log_norm: Vec<f64>,
    means: Vec<DVector<f64>>,
    precisions: Vec<DMatrix<f64>>,
}

/// Running per-component quantities for one block: `P_k (x − μ_k)` and the quadratic form.
struct BlockState {
    resid: Vec<DVector<f64>>,
    quad: Vec<f64>,
}

impl BlockPrior {
    fn new(gmm: &AdaptedGmm, local: &[usize]) -> Result<Self> {
        let r = local.len();
        let mut log_norm = Vec::new();
        let mut means = Vec::new();
        let mut precisions = Vec::new();
        for ((w, m), c) in gmm.weights().iter().zip(gmm.means()).zip(gmm.covs()) {
            let c = DMatrix::from_fn(r, r, |i, j| c[(local[i], local[j])]);
            let ch = c.cholesky().ok_or_else(|| Error::NotPositiveDefinite("prior component".into()))?;
            let logdet: f64 = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            log_norm.push(w.ln() - 0.5 * logdet);
            means.push(DVector::from_iterator(r, local.iter().map(|&i| m[i])));
            precisions.push(ch.inverse());
        }
        Ok(Self {
            log_norm,
            means,
            precisions,
        })
    }

    fn state(&self, x: &DVector<f64>) -> BlockState {
        let resid: Vec<DVector<f64>> = self.means.iter().zip(&self.precisions).map(|(m, p)| p * (x - m)).collect();
        let quad = resid.iter().zip(&self.means).map(|(r, m)| r.dot(&(x - m))).collect();
        BlockState { resid, quad }
    }

    fn log_density(&self, quad: impl Iterator<Item = f64>) -> f64 {
        let terms: Vec<f64> = self.log_norm.iter().zip(quad).map(|(l, q)| l - 0.5 * q).collect();
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
    }
}

fn log_lik(kind: McmcLikelihood, y: f64, u: f64) -> f64 {
    match kind {
        McmcLikelihood::Poisson => {
            if u > 0.0 {
                y * u.ln() - u
            } else if y == 0.0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
        McmcLikelihood::Gaussian { variance } => -0.5 * (y - u) * (y - u) / variance,
    }
}

pub const MCMC_LIMIT: usize = 256;

pub fn mcmc_poisson_reference(
    y: &[f64],
    op: &DegradationOperator,
    gmm: &AdaptedGmm,
    part: &Partition,
    opts: &McmcOptions,
) -> Result<McmcResult> {
    let n = y.len();
    if n > MCMC_LIMIT {
        return Err(Error::invalid(format!("MCMC reference limited to {MCMC_LIMIT} pixels, got {n}")));
    }
    Error::check_len(part.pixel_count(), n)?;
    Error::check_len(op.len(), n)?;
    if opts.batches < 2 || opts.sweeps < opts.batches {
        return Err(Error::invalid("need at least two batches and one sweep per batch"));
    }
    let priors: Vec<BlockPrior> = part.blocks().iter().map(|b| BlockPrior::new(gmm, &b.local)).collect::<Result<_>>()?;
    let columns: Vec<Vec<(usize, f64)>> = (0..n).map(|a| op.column(a)).collect::<Result<_>>()?;

    // start from a point of positive density
    let mut x: Vec<f64> = match opts.likelihood {
        McmcLikelihood::Poisson => y.iter().map(|v| v + 0.5).collect(),
        McmcLikelihood::Gaussian { .. } => y.to_vec(),
    };
    let mut u = op.apply(&x)?;
    if (0..n).any(|i| log_lik(opts.likelihood, y[i], u[i]) == f64::NEG_INFINITY) {
        x = vec![y.iter().cloned().fold(0.0, f64::max) + 1.0; n];
        u = op.apply(&x)?;
    }
    let mut states: Vec<BlockState> = part
        .blocks()
        .iter()
        .zip(&priors)
        .map(|(b, p)| p.state(&DVector::from_iterator(b.len(), b.indices.iter().map(|&i| x[i]))))
        .collect();
    let owner: Vec<(usize, usize)> = (0..n).map(|a| part.owner(a)).collect();

    let mut step: Vec<f64> = (0..n).map(|i| 0.5 * (y[i] + 1.0).sqrt().min(1.0) + 0.05).collect();
    let mut accepted_run = vec![0usize; n];
    let mut rng = rng::stream(opts.seed, &[0x6d636d63]);
    let per_batch = opts.sweeps / opts.batches;
    let kept = per_batch * opts.batches;
    let mut sum = vec![0.0; n];
    let mut sumsq = vec![0.0; n];
    let mut batch_sum = vec![0.0; n];
    let mut batch_means = vec![Vec::with_capacity(opts.batches); n];
    let mut accepted = 0u64;
    let mut proposals = 0u64;

    for sweep in 0..opts.burn_in + kept {
        for a in 0..n {
            let delta = step[a] * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let (j, i) = owner[a];
            let prior = &priors[j];
            let st = &states[j];
            let old_prior = prior.log_density(st.quad.iter().copied());
            let new_quad: Vec<f64> = st
                .quad
                .iter()
                .zip(&st.resid)
                .zip(&prior.precisions)
                .map(|((q, r), p)| q + 2.0 * delta * r[i] + delta * delta * p[(i, i)])
                .collect();
            let new_prior = prior.log_density(new_quad.iter().copied());
            let mut dl = new_prior - old_prior;
            for &(row, v) in &columns[a] {
                dl += log_lik(opts.likelihood, y[row], u[row] + v * delta) - log_lik(opts.likelihood, y[row], u[row]);
            }
            proposals += 1;
            if dl >= 0.0 || rng.random::<f64>() < dl.exp() {
                x[a] += delta;
                for &(row, v) in &columns[a] {
                    u[row] += v * delta;
                }
                let st = &mut states[j];
                st.quad = new_quad;
                for (r, p) in st.resid.iter_mut().zip(&prior.precisions) {
                    r.axpy(delta, &p.column(i), 1.0);
                }
                accepted += 1;
                accepted_run[a] += 1;
            }
        }
        if sweep < opts.burn_in {
            if (sweep + 1) % 100 == 0 {
                for a in 0..n {
                    let rate = accepted_run[a] as f64 / 100.0;
                    step[a] *= if rate > 0.44 { 1.1 } else { 0.9 };
                    accepted_run[a] = 0;
                }
            }
            if sweep + 1 == opts.burn_in {
                accepted = 0;
                proposals = 0;
                // recompute cached quantities to shed accumulated rounding
                for ((b, p), st) in part.blocks().iter().zip(&priors).zip(states.iter_mut()) {
                    *st = p.state(&DVector::from_iterator(b.len(), b.indices.iter().map(|&i| x[i])));
                }
                u = op.apply(&x)?;
            }
            continue;
        }
        for a in 0..n {
            sum[a] += x[a];
            sumsq[a] += x[a] * x[a];
            batch_sum[a] += x[a];
        }
        let t = sweep - opts.burn_in + 1;
        if t % per_batch == 0 {
            for a in 0..n {
                batch_means[a].push(batch_sum[a] / per_batch as f64);
                batch_sum[a] = 0.0;
            }
        }
    }
    let s = kept as f64;
    let mean: Vec<f64> = sum.iter().map(|v| v / s).collect();
    let variances: Vec<f64> = sumsq.iter().zip(&mean).map(|(q, m)| (q / s - m * m).max(0.0)).collect();
    let b = opts.batches as f64;
    let std_errors = batch_means
        .iter()
        .zip(&mean)
        .map(|(bm, m)| {
            let v = bm.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (b - 1.0);
            (v / b).sqrt()
        })
        .collect();
    Ok(McmcResult {
        mean,
        variances,
        std_errors,
        acceptance: accepted as f64 / proposals.max(1) as f64,
    })
}
