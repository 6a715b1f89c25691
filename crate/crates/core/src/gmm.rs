//! Gaussian-mixture patch prior: storage, offset/scale adaptation, marginalization,
//! tilted moments against a Gaussian cavity, a small EM trainer and a binary file format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, chol_logdet, factor_spd};
use crate::partition::Partition;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// K-component mixture over vectorized `r`-pixel patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGmm {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

impl PatchGmm {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        Error::check_len(k, means.len())?;
        Error::check_len(k, covs.len())?;
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::invalid("patch dimension must be positive"));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        for (i, (m, c)) in means.iter().zip(&covs).enumerate() {
            Error::check_len(dim, m.len())?;
            if c.nrows() != dim || c.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.nrows(),
                });
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("component {i} mean is not finite")));
            }
            if (c - c.transpose()).abs().max() > 1e-10 * c.abs().max().max(1e-300) {
                return Err(Error::invalid(format!("component {i} covariance is not symmetric")));
            }
            if !linalg::is_spd(c) {
                return Err(Error::NotPositiveDefinite(format!("component {i} covariance")));
            }
        }
        Ok(Self { weights, means, covs })
    }

    /// Like [`PatchGmm::new`] but rescales the weights to sum to one first.
    pub fn new_normalized(mut weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::invalid("mixture weights must be positive"));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Self::new(weights, means, covs)
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    pub fn marginalize(&self, subset: &[usize]) -> Result<Self> {
        check_subset(subset, self.dim())?;
        Ok(Self {
            weights: self.weights.clone(),
            means: self.means.iter().map(|m| m.select_rows(subset)).collect(),
            covs: self.covs.iter().map(|c| c.select_rows(subset).select_columns(subset)).collect(),
        })
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        Error::check_len(self.dim(), x.len())?;
        let mut terms = Vec::with_capacity(self.k());
        for ((w, m), c) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            terms.push(w.ln() + gaussian_log_density(x, m, c)?);
        }
        Ok(log_sum_exp(&terms))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<DVector<f64>> {
        sample_mixture(&self.weights, &self.means, &self.covs, rng)
    }
}

fn check_subset(subset: &[usize], dim: usize) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::invalid("marginalization subset is empty"));
    }
    if let Some(&i) = subset.iter().find(|&&i| i >= dim) {
        return Err(Error::IndexOutOfRange { index: i, len: dim });
    }
    Ok(())
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let c = factor_spd(cov)?;
    let d = x - mean;
    let z = c.l_dirty().solve_lower_triangular(&d).ok_or_else(|| Error::NotPositiveDefinite("covariance".into()))?;
    Ok(-0.5 * (z.norm_squared() + chol_logdet(&c) + x.len() as f64 * LN_2PI))
}

fn sample_mixture(
    weights: &[f64],
    means: &[DVector<f64>],
    covs: &[DMatrix<f64>],
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut k = weights.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            k = i;
            break;
        }
    }
    let l = factor_spd(&covs[k])?.l();
    let z = DVector::from_fn(means[k].len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(&means[k] + l * z)
}

/// Offset, patch-mean variance and scale applied to a trained mixture.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub m0: f64,
    pub s2: f64,
    pub alpha: f64,
}

impl Default for Theta {
    fn default() -> Self {
        Self {
            m0: 0.0,
            s2: 0.0,
            alpha: 1.0,
        }
    }
}

impl Theta {
    pub fn new(m0: f64, s2: f64, alpha: f64) -> Result<Self> {
        let t = Self { m0, s2, alpha };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.s2 >= 0.0 && self.s2.is_finite()) || !self.m0.is_finite() {
            return Err(Error::invalid("s2 must be non-negative and m0 finite"));
        }
        Ok(())
    }
}

/// Mixture with means `m0·1 + α·μ_k` and covariances `s²·11ᵀ + α²·C_k`.
#[derive(Clone, Debug)]
pub struct AdaptedGmm {
    base: PatchGmm,
    theta: Theta,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

pub fn adapt(base: &PatchGmm, theta: Theta) -> Result<AdaptedGmm> {
    theta.validate()?;
    let r = base.dim();
    let means = base.means.iter().map(|m| m.map(|v| theta.m0 + theta.alpha * v)).collect();
    let covs = base
        .covs
        .iter()
        .map(|c| {
            let mut e = c * (theta.alpha * theta.alpha);
            e.add_scalar_mut(theta.s2);
            debug_assert_eq!(e.nrows(), r);
            e
        })
        .collect();
    Ok(AdaptedGmm {
        base: base.clone(),
        theta,
        means,
        covs,
    })
}

impl AdaptedGmm {
    pub fn base(&self) -> &PatchGmm {
        &self.base
    }

    pub fn theta(&self) -> Theta {
        self.theta
    }

    pub fn k(&self) -> usize {
        self.base.k()
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn weights(&self) -> &[f64] {
        &self.base.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    pub fn marginalize(&self, subset: &[usize]) -> Result<AdaptedGmm> {
        adapt(&self.base.marginalize(subset)?, self.theta)
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        Error::check_len(self.dim(), x.len())?;
        let mut terms = Vec::with_capacity(self.k());
        for ((w, m), c) in self.weights().iter().zip(&self.means).zip(&self.covs) {
            terms.push(w.ln() + gaussian_log_density(x, m, c)?);
        }
        Ok(log_sum_exp(&terms))
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<DVector<f64>> {
        sample_mixture(self.weights(), &self.means, &self.covs, rng)
    }

    /// Mixture mean and covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let r = self.dim();
        let mut mean = DVector::zeros(r);
        for (w, m) in self.weights().iter().zip(&self.means) {
            mean += m * *w;
        }
        let mut cov = DMatrix::zeros(r, r);
        for ((w, m), c) in self.weights().iter().zip(&self.means).zip(&self.covs) {
            let d = m - &mean;
            cov += (c + &d * d.transpose()) * *w;
        }
        (mean, cov)
    }
}

/// Moments of a GMM multiplied by a Gaussian cavity.
#[derive(Clone, Debug)]
pub struct TiltedGmmMoments {
    pub weights: Vec<f64>,
    pub component_means: Vec<DVector<f64>>,
    pub component_covs: Vec<DMatrix<f64>>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Clone, Debug)]
struct PreparedComponent {
    log_weight: f64,
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    logdet: f64,
    /// `C̃⁻¹ μ̃` and `μ̃ᵀ C̃⁻¹ μ̃`.
    info: DVector<f64>,
    quad: f64,
}

/// Adapted mixture with cached inverse covariances and log-determinants.
#[derive(Clone, Debug)]
pub struct PreparedGmm {
    dim: usize,
    comps: Vec<PreparedComponent>,
}

impl PreparedGmm {
    pub fn new(g: &AdaptedGmm) -> Result<Self> {
        let comps = g
            .weights()
            .iter()
            .zip(g.means())
            .zip(g.covs())
            .map(|((w, m), c)| {
                let ch = factor_spd(c)?;
                let mut precision = ch.inverse();
                linalg::symmetrize(&mut precision);
                let info = &precision * m;
                Ok(PreparedComponent {
                    log_weight: w.ln(),
                    quad: m.dot(&info),
                    mean: m.clone(),
                    precision,
                    logdet: chol_logdet(&ch),
                    info,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { dim: g.dim(), comps })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Tilted moments for a cavity given in information form (precision `omega`, mean `m`).
    ///
    /// Never inverts `omega`, so near-zero cavity precisions are fine.
    pub fn tilted(&self, m: &DVector<f64>, omega: &DMatrix<f64>, keep_components: bool) -> Result<TiltedGmmMoments> {
        Error::check_len(self.dim, m.len())?;
        Error::check_len(self.dim, omega.nrows())?;
        let k = self.comps.len();
        let mut logw = Vec::with_capacity(k);
        let mut mus = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for c in &self.comps {
            let lambda = omega + &c.precision;
            let ch = factor_spd(&lambda)?;
            let mut chat = ch.inverse();
            linalg::symmetrize(&mut chat);
            let d = m - &c.mean;
            let g = &c.precision * &d;
            let cg = &chat * &g;
            // (Σ + C̃)⁻¹ = C̃⁻¹ − C̃⁻¹ Λ⁻¹ C̃⁻¹, so no large terms cancel when Ω is large
            let maha = d.dot(&g) - g.dot(&cg);
            logw.push(c.log_weight - 0.5 * (chol_logdet(&ch) + c.logdet + maha));
            mus.push(m - cg);
            covs.push(chat);
        }
        Ok(self.mixture(&logw, mus, covs, keep_components))
    }

    /// Tilted moments for a cavity `exp(−½xᵀΩx + hᵀx)` given by its natural parameters.
    ///
    /// The cavity may be improper in some directions as long as `Ω + C̃⁻¹` is positive definite.
    pub fn tilted_info(&self, h: &DVector<f64>, omega: &DMatrix<f64>, keep_components: bool) -> Result<TiltedGmmMoments> {
        Error::check_len(self.dim, h.len())?;
        Error::check_len(self.dim, omega.nrows())?;
        let k = self.comps.len();
        let mut logw = Vec::with_capacity(k);
        let mut mus = Vec::with_capacity(k);
        let mut covs = Vec::with_capacity(k);
        for c in &self.comps {
            let ch = factor_spd(&(omega + &c.precision))?;
            let b = h + &c.info;
            let mu = ch.solve(&b);
            let mut chat = ch.inverse();
            linalg::symmetrize(&mut chat);
            logw.push(c.log_weight - 0.5 * (chol_logdet(&ch) + c.logdet + c.quad - b.dot(&mu)));
            mus.push(mu);
            covs.push(chat);
        }
        Ok(self.mixture(&logw, mus, covs, keep_components))
    }

    fn mixture(
        &self,
        logw: &[f64],
        mus: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
        keep_components: bool,
    ) -> TiltedGmmMoments {
        let lse = log_sum_exp(logw);
        let weights: Vec<f64> = logw.iter().map(|l| (l - lse).exp()).collect();
        let mut mean = DVector::zeros(self.dim);
        for (w, mu) in weights.iter().zip(&mus) {
            mean.axpy(*w, mu, 1.0);
        }
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for ((w, mu), c) in weights.iter().zip(&mus).zip(&covs) {
            let d = mu - &mean;
            cov += c * *w;
            cov.ger(*w, &d, &d, 1.0);
        }
        linalg::symmetrize(&mut cov);
        let (component_means, component_covs) = if keep_components { (mus, covs) } else { (Vec::new(), Vec::new()) };
        TiltedGmmMoments {
            weights,
            component_means,
            component_covs,
            mean,
            cov,
        }
    }
}

/// Tilted moments of `gmm(x)·N(x; cavity_mean, cavity_cov)`.
pub fn tilted_gmm_moments(
    gmm: &AdaptedGmm,
    cavity_mean: &DVector<f64>,
    cavity_cov: &DMatrix<f64>,
) -> Result<TiltedGmmMoments> {
    Error::check_len(gmm.dim(), cavity_mean.len())?;
    if !linalg::is_spd(cavity_cov) {
        return Err(Error::NotPositiveDefinite("cavity covariance".into()));
    }
    let omega = linalg::spd_inverse(cavity_cov)?;
    PreparedGmm::new(gmm)?.tilted(cavity_mean, &omega, true)
}

/// One prepared (possibly marginalized) prior per block of `partition`.
pub fn prepare_for_partition(gmm: &AdaptedGmm, partition: &Partition) -> Result<Vec<Arc<PreparedGmm>>> {
    if gmm.dim() != partition.patch_dim() {
        return Err(Error::DimensionMismatch {
            expected: partition.patch_dim(),
            got: gmm.dim(),
        });
    }
    let mut cache: BTreeMap<Vec<usize>, Arc<PreparedGmm>> = BTreeMap::new();
    partition
        .blocks()
        .iter()
        .map(|b| {
            if let Some(p) = cache.get(&b.local) {
                return Ok(p.clone());
            }
            let g = if b.len() == gmm.dim() {
                PreparedGmm::new(gmm)?
            } else {
                PreparedGmm::new(&gmm.marginalize(&b.local)?)?
            };
            let p = Arc::new(g);
            cache.insert(b.local.clone(), p.clone());
            Ok(p)
        })
        .collect()
}

/// Options for [`train_em`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmOptions {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Strength of the covariance floor; component k receives `reg / N_k` on its diagonal.
    pub reg: f64,
    /// Pseudo-count keeping every weight strictly positive.
    pub weight_prior: f64,
    /// Stop once the objective improves by less than `tol · |objective|`.
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            k: 5,
            max_iters: 100,
            seed: 0,
            reg: 1e-4,
            weight_prior: 1e-3,
            tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub gmm: PatchGmm,
    /// Penalized log-likelihood of the model entering each iteration, then of the final model.
    pub objective: Vec<f64>,
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
}

/// Penalized objective that EM increases monotonically.
pub fn em_objective(gmm: &PatchGmm, samples: &[DVector<f64>], opts: &EmOptions) -> Result<(f64, f64)> {
    let ll = samples.iter().map(|x| gmm.log_density(x)).sum::<Result<f64>>()?;
    let mut pen = 0.0;
    for (w, c) in gmm.weights.iter().zip(&gmm.covs) {
        pen += opts.weight_prior * w.ln() - 0.5 * opts.reg * linalg::spd_inverse(c)?.trace();
    }
    Ok((ll + pen, ll))
}

/// Maximum a posteriori EM for a Gaussian mixture on patch samples.
pub fn train_em(samples: &[DVector<f64>], opts: &EmOptions) -> Result<EmFit> {
    if opts.k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    if samples.len() < opts.k {
        return Err(Error::invalid(format!("{} samples for {} components", samples.len(), opts.k)));
    }
    if !(opts.reg > 0.0) || opts.weight_prior < 0.0 {
        return Err(Error::invalid("reg must be positive and weight_prior non-negative"));
    }
    let dim = samples[0].len();
    for s in samples {
        Error::check_len(dim, s.len())?;
    }
    let n = samples.len() as f64;
    let mut global_mean = DVector::zeros(dim);
    for s in samples {
        global_mean += s;
    }
    global_mean /= n;
    let mut global_cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = s - &global_mean;
        global_cov.ger(1.0 / n, &d, &d, 1.0);
    }
    let floor = DMatrix::identity(dim, dim) * (opts.reg / n);

    let mut distinct: Vec<&DVector<f64>> = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    for &i in &order {
        if distinct.len() == opts.k {
            break;
        }
        if !distinct.iter().any(|d| *d == &samples[i]) {
            distinct.push(&samples[i]);
        }
    }
    if distinct.len() < opts.k {
        log::warn!("only {} distinct samples; falling back to a single component", distinct.len());
        let gmm = PatchGmm::new(vec![1.0], vec![global_mean], vec![&global_cov + &floor])?;
        let (obj, ll) = em_objective(&gmm, samples, opts)?;
        return Ok(EmFit {
            gmm,
            objective: vec![obj],
            log_likelihood: vec![ll],
            iterations: 0,
        });
    }
    let k = opts.k;
    let mut gmm = PatchGmm::new_normalized(
        vec![1.0; k],
        distinct.into_iter().cloned().collect(),
        vec![&global_cov + &floor; k],
    )?;
    let (obj, ll) = em_objective(&gmm, samples, opts)?;
    let mut objective = vec![obj];
    let mut log_likelihood = vec![ll];
    let mut iterations = 0;
    for _ in 0..opts.max_iters {
        gmm = em_step(&gmm, samples, opts)?;
        iterations += 1;
        let (obj, ll) = em_objective(&gmm, samples, opts)?;
        let prev = *objective.last().unwrap();
        objective.push(obj);
        log_likelihood.push(ll);
        if (obj - prev).abs() <= opts.tol * obj.abs().max(1.0) {
            break;
        }
    }
    Ok(EmFit {
        gmm,
        objective,
        log_likelihood,
        iterations,
    })
}

fn em_step(gmm: &PatchGmm, samples: &[DVector<f64>], opts: &EmOptions) -> Result<PatchGmm> {
    let k = gmm.k();
    let dim = gmm.dim();
    let prepared: Vec<_> = gmm
        .covs
        .iter()
        .map(|c| {
            let ch = factor_spd(c)?;
            let ld = chol_logdet(&ch);
            Ok((ch, ld))
        })
        .collect::<Result<_>>()?;
    let mut resp = vec![vec![0.0; k]; samples.len()];
    let mut lw = vec![0.0; k];
    for (x, row) in samples.iter().zip(resp.iter_mut()) {
        for (j, (ch, ld)) in prepared.iter().enumerate() {
            let d = x - &gmm.means[j];
            let z = ch.l_dirty().solve_lower_triangular(&d).unwrap();
            lw[j] = gmm.weights[j].ln() - 0.5 * (z.norm_squared() + ld);
        }
        let lse = log_sum_exp(&lw);
        for j in 0..k {
            row[j] = (lw[j] - lse).exp();
        }
    }
    let n = samples.len() as f64;
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for j in 0..k {
        let nk: f64 = resp.iter().map(|r| r[j]).sum();
        weights.push((nk + opts.weight_prior) / (n + k as f64 * opts.weight_prior));
        if nk <= f64::MIN_POSITIVE {
            means.push(gmm.means[j].clone());
            covs.push(gmm.covs[j].clone());
            continue;
        }
        let mut mu = DVector::zeros(dim);
        for (x, r) in samples.iter().zip(&resp) {
            mu.axpy(r[j], x, 1.0);
        }
        mu /= nk;
        let mut c = DMatrix::identity(dim, dim) * opts.reg;
        for (x, r) in samples.iter().zip(&resp) {
            let d = x - &mu;
            c.ger(r[j], &d, &d, 1.0);
        }
        c /= nk;
        linalg::symmetrize(&mut c);
        means.push(mu);
        covs.push(c);
    }
    PatchGmm::new_normalized(weights, means, covs)
}

/// Vectorized `p × p` patches taken every `stride` pixels, optionally with their mean removed.
pub fn extract_patches(
    data: &[f64],
    width: usize,
    height: usize,
    patch: usize,
    stride: usize,
    remove_mean: bool,
) -> Result<Vec<DVector<f64>>> {
    Error::check_len(width * height, data.len())?;
    if patch == 0 || stride == 0 || patch > width || patch > height {
        return Err(Error::invalid("invalid patch size or stride"));
    }
    let mut out = Vec::new();
    let mut y = 0;
    while y + patch <= height {
        let mut x = 0;
        while x + patch <= width {
            let mut v = DVector::from_fn(patch * patch, |i, _| data[(y + i / patch) * width + x + i % patch]);
            if remove_mean {
                let m = v.mean();
                v.add_scalar_mut(-m);
            }
            out.push(v);
            x += stride;
        }
        y += stride;
    }
    Ok(out)
}

const GMM_MAGIC: &[u8; 4] = b"PEPG";
const GMM_VERSION: u32 = 1;

pub fn gmm_to_bytes(g: &PatchGmm) -> Vec<u8> {
    let (k, d) = (g.k(), g.dim());
    let mut out = Vec::with_capacity(16 + k * 8 * (1 + d + d * d));
    out.extend_from_slice(GMM_MAGIC);
    out.extend_from_slice(&GMM_VERSION.to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for i in 0..k {
        out.extend_from_slice(&g.weights[i].to_le_bytes());
        for v in g.means[i].iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in 0..d {
            for c in 0..d {
                out.extend_from_slice(&g.covs[i][(r, c)].to_le_bytes());
            }
        }
    }
    out
}

pub fn gmm_from_bytes(bytes: &[u8]) -> Result<PatchGmm> {
    if bytes.len() < 16 || &bytes[..4] != GMM_MAGIC {
        return Err(Error::Format("missing PEPG magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != GMM_VERSION {
        return Err(Error::Format(format!("unsupported GMM file version {version}")));
    }
    let (k, d) = (word(8) as usize, word(12) as usize);
    let per = 1usize
        .checked_add(d)
        .and_then(|v| d.checked_mul(d).and_then(|dd| v.checked_add(dd)))
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Format("GMM dimensions overflow".into()))?;
    let expected = k.checked_mul(per).and_then(|v| v.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(Error::Format(format!("GMM file has {} bytes, expected {expected:?}", bytes.len())));
    }
    let mut vals = bytes[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for _ in 0..k {
        weights.push(vals.next().unwrap());
        means.push(DVector::from_iterator(d, vals.by_ref().take(d)));
        covs.push(DMatrix::from_row_iterator(d, d, vals.by_ref().take(d * d)));
    }
    PatchGmm::new(weights, means, covs).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_gmm(path: impl AsRef<Path>, g: &PatchGmm) -> Result<()> {
    fs::write(path, gmm_to_bytes(g))?;
    Ok(())
}

pub fn load_gmm(path: impl AsRef<Path>) -> Result<PatchGmm> {
    gmm_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(r: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(r, r, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(r, r) * 0.5
    }

    fn two_component() -> PatchGmm {
        PatchGmm::new(
            vec![0.3, 0.7],
            vec![DVector::from_vec(vec![0.1, -0.2]), DVector::from_vec(vec![-0.3, 0.4])],
            vec![spd(2, 1), spd(2, 2)],
        )
        .unwrap()
    }

    #[test]
    fn identity_adaptation() {
        let g = two_component();
        let a = adapt(&g, Theta::default()).unwrap();
        assert_eq!(a.means(), g.means());
        assert_eq!(a.covs(), g.covs());
    }

    #[test]
    fn adaptation_formula() {
        let g = PatchGmm::new(vec![1.0], vec![DVector::zeros(2)], vec![DMatrix::identity(2, 2)]).unwrap();
        let a = adapt(&g, Theta::new(0.0, 0.3, 2.0).unwrap()).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[4.3, 0.3, 0.3, 4.3]);
        assert!((a.covs()[0].clone() - expect).abs().max() < 1e-15);
        assert!(adapt(&g, Theta { m0: 0.0, s2: 0.0, alpha: 0.0 }).is_err());
    }

    #[test]
    fn marginalize_keeps_weights_and_restricts() {
        let g = PatchGmm::new(
            vec![1.0],
            vec![DVector::from_vec(vec![1.0, 2.0])],
            vec![DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 5.0])],
        )
        .unwrap();
        let m = g.marginalize(&[0]).unwrap();
        assert_eq!(m.covs()[0][(0, 0)], 3.0);
        assert_eq!(m.means()[0][0], 1.0);
        assert!(g.marginalize(&[]).is_err());
        assert_eq!(g.marginalize(&[0, 1]).unwrap(), g);
    }

    #[test]
    fn single_component_tilt_is_gaussian_product() {
        let g = PatchGmm::new(vec![1.0], vec![DVector::from_vec(vec![1.0, -1.0])], vec![spd(2, 3)]).unwrap();
        let a = adapt(&g, Theta::default()).unwrap();
        let cav_cov = spd(2, 4);
        let cav_mean = DVector::from_vec(vec![0.2, 0.5]);
        let t = tilted_gmm_moments(&a, &cav_mean, &cav_cov).unwrap();
        let p1 = linalg::spd_inverse(&cav_cov).unwrap();
        let p0 = linalg::spd_inverse(&g.covs()[0]).unwrap();
        let c = linalg::spd_inverse(&(&p0 + &p1)).unwrap();
        let m = &c * (&p1 * &cav_mean + &p0 * &g.means()[0]);
        assert!((t.weights[0] - 1.0).abs() < 1e-15);
        assert!((&t.cov - &c).abs().max() < 1e-12);
        assert!((&t.mean - &m).abs().max() < 1e-12);
        assert!((&t.cov - &t.component_covs[0]).abs().max() == 0.0);
    }

    #[test]
    fn flat_cavity_returns_prior_moments() {
        let a = adapt(&two_component(), Theta::default()).unwrap();
        let t = tilted_gmm_moments(&a, &DVector::zeros(2), &(DMatrix::identity(2, 2) * 1e12)).unwrap();
        let (m, c) = a.moments();
        assert!((&t.mean - m).abs().max() < 1e-9);
        assert!((&t.cov - c).abs().max() < 1e-9);
    }

    #[test]
    fn gmm_file_roundtrip_and_corruption() {
        let g = two_component();
        let bytes = gmm_to_bytes(&g);
        assert_eq!(gmm_from_bytes(&bytes).unwrap(), g);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(gmm_from_bytes(&bad).is_err());
        assert!(gmm_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn zero_iterations_returns_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<_> = (0..50).map(|_| DVector::from_fn(2, |_, _| rng.random::<f64>())).collect();
        let opts = EmOptions {
            k: 3,
            max_iters: 0,
            seed: 9,
            ..Default::default()
        };
        let a = train_em(&samples, &opts).unwrap();
        let b = train_em(&samples, &opts).unwrap();
        assert_eq!(a.iterations, 0);
        assert_eq!(a.gmm, b.gmm);
        assert!(a.gmm.means().iter().all(|m| samples.contains(m)));
    }

    #[test]
    fn identical_samples_fall_back_to_one_component() {
        let samples = vec![DVector::from_vec(vec![0.5, 0.5]); 20];
        let fit = train_em(&samples, &EmOptions { k: 3, ..Default::default() }).unwrap();
        assert_eq!(fit.gmm.k(), 1);
        assert!(linalg::is_spd(&fit.gmm.covs()[0]));
    }
}
