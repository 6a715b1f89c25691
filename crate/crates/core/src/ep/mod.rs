//! Expectation propagation on the x-side factor pair `{q_x0, q_x1}`.
//!
//! Sites are stored in information form (precision blocks plus a mean) so that
//! near-flat factors, whose precision sits at the `1e-8` floor, stay usable.
//! The Gaussian and Poisson loops in [`gaussian`] and [`poisson`] share every
//! routine in this module.

pub mod gaussian;
pub mod poisson;

use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cg::preconditioned_cg;
use crate::error::{Error, Result};
use crate::forward::DegradationOperator;
use crate::gmm::PreparedGmm;
use crate::kl::{self, BlockKlProblem, BlockStructure, PRECISION_FLOOR};
use crate::linalg::{self, factor_spd};
use crate::partition::Partition;
use crate::rng;
use crate::structured::{StructuredGaussian, StructuredMatrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StructureChoice {
    /// Diagonal for identity and mask operators, block-diagonal for convolutions.
    #[default]
    Auto,
    Diagonal,
    BlockDiagonal,
}

/// How `h_n m̃_n` and `h_n Ω̃_n⁻¹ h_nᵀ` are formed in the Poisson `q_u1` update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UCavity {
    /// Remove `q_u0(u_n)` from the joint marginal of `h_n x` by a rank-one downdate.
    #[default]
    Downdated,
    /// Use the joint moments `(h_n m*, h_n Σ* h_nᵀ)` unchanged.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpConfig {
    pub damping: f64,
    pub damp_first_iteration: bool,
    /// Per-pixel scale of the squared-change stopping rule.
    pub stop_threshold: f64,
    pub max_iters: usize,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
    pub rbmc_samples: usize,
    /// Draw fresh RBMC samples every iteration; by default the same draws are reused,
    /// which makes the update map deterministic so the stopping rule can be met.
    pub rbmc_resample: bool,
    pub structure: StructureChoice,
    pub kl_max_iters: usize,
    pub kl_tol: f64,
    pub u_cavity: UCavity,
    pub seed: u64,
}

impl Default for EpConfig {
    fn default() -> Self {
        Self {
            damping: 0.7,
            damp_first_iteration: false,
            stop_threshold: 1e-8,
            max_iters: 50,
            cg_tol: 1e-8,
            cg_max_iters: 500,
            rbmc_samples: 20,
            rbmc_resample: false,
            structure: StructureChoice::Auto,
            kl_max_iters: 200,
            kl_tol: 1e-8,
            u_cavity: UCavity::Downdated,
            seed: 0,
        }
    }
}

impl EpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::invalid(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        for (name, v) in [
            ("stop_threshold", self.stop_threshold),
            ("cg_tol", self.cg_tol),
            ("kl_tol", self.kl_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("max_iters", self.max_iters),
            ("cg_max_iters", self.cg_max_iters),
            ("rbmc_samples", self.rbmc_samples),
            ("kl_max_iters", self.kl_max_iters),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Damping weight for iteration `iteration` (1-based).
    pub fn damping_at(&self, iteration: usize) -> f64 {
        if iteration <= 1 && !self.damp_first_iteration {
            1.0
        } else {
            self.damping
        }
    }
}

pub fn resolve_structure(choice: StructureChoice, op: &DegradationOperator) -> BlockStructure {
    match choice {
        StructureChoice::Diagonal => BlockStructure::Diagonal,
        StructureChoice::BlockDiagonal => BlockStructure::FullBlock,
        StructureChoice::Auto if op.is_diagonal() => BlockStructure::Diagonal,
        StructureChoice::Auto => BlockStructure::FullBlock,
    }
}

/// Precision or covariance with either per-pixel or per-block storage.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockMats {
    Diag(Vec<f64>),
    Full(Vec<DMatrix<f64>>),
}

impl BlockMats {
    pub fn from_diagonal(part: &Partition, structure: BlockStructure, values: &[f64]) -> Self {
        match structure {
            BlockStructure::Diagonal => BlockMats::Diag(values.to_vec()),
            BlockStructure::FullBlock => BlockMats::Full(
                part.blocks()
                    .iter()
                    .map(|b| DMatrix::from_diagonal(&DVector::from_iterator(b.len(), b.indices.iter().map(|&i| values[i]))))
                    .collect(),
            ),
        }
    }

    pub fn structure(&self) -> BlockStructure {
        match self {
            BlockMats::Diag(_) => BlockStructure::Diagonal,
            BlockMats::Full(_) => BlockStructure::FullBlock,
        }
    }

    pub fn block(&self, part: &Partition, j: usize) -> DMatrix<f64> {
        match self {
            BlockMats::Full(b) => b[j].clone(),
            BlockMats::Diag(v) => {
                let idx = &part.blocks()[j].indices;
                DMatrix::from_diagonal(&DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i])))
            }
        }
    }

    pub fn diagonal(&self, part: &Partition) -> Vec<f64> {
        match self {
            BlockMats::Diag(v) => v.clone(),
            BlockMats::Full(blocks) => {
                let mut out = vec![0.0; part.pixel_count()];
                for (b, m) in part.blocks().iter().zip(blocks) {
                    for (k, &i) in b.indices.iter().enumerate() {
                        out[i] = m[(k, k)];
                    }
                }
                out
            }
        }
    }

    pub fn matvec(&self, part: &Partition, x: &[f64]) -> Vec<f64> {
        match self {
            BlockMats::Diag(v) => v.iter().zip(x).map(|(a, b)| a * b).collect(),
            BlockMats::Full(blocks) => {
                let mut out = vec![0.0; x.len()];
                for (b, m) in part.blocks().iter().zip(blocks) {
                    // column-major storage: column k scales x at the k-th block pixel
                    for (col, &k) in m.as_slice().chunks_exact(b.len()).zip(&b.indices) {
                        let xk = x[k];
                        for (v, &i) in col.iter().zip(&b.indices) {
                            out[i] += v * xk;
                        }
                    }
                }
                out
            }
        }
    }

    /// Inverse of an SPD precision or covariance.
    pub fn inverse(&self) -> Result<Self> {
        match self {
            BlockMats::Diag(v) => {
                if v.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
                    return Err(Error::NotPositiveDefinite("diagonal entry".into()));
                }
                Ok(BlockMats::Diag(v.iter().map(|p| 1.0 / p).collect()))
            }
            BlockMats::Full(b) => Ok(BlockMats::Full(b.iter().map(linalg::spd_inverse).collect::<Result<_>>()?)),
        }
    }

    pub fn to_structured(&self, part: &Arc<Partition>) -> StructuredMatrix {
        match self {
            BlockMats::Diag(v) => StructuredMatrix::Diagonal(v.clone()),
            BlockMats::Full(b) => StructuredMatrix::BlockDiagonal {
                partition: part.clone(),
                blocks: b.clone(),
            },
        }
    }
}

/// One Gaussian EP factor on x in natural parameters: `exp(−½xᵀΩx + hᵀx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Site {
    pub info: Vec<f64>,
    pub precision: BlockMats,
}

impl Site {
    pub fn from_moments(part: &Partition, structure: BlockStructure, mean: &[f64], variance: &[f64]) -> Self {
        let prec: Vec<f64> = variance.iter().map(|v| 1.0 / v).collect();
        Self {
            info: mean.iter().zip(&prec).map(|(m, p)| m * p).collect(),
            precision: BlockMats::from_diagonal(part, structure, &prec),
        }
    }

    /// `Ω⁻¹ h`; ill-conditioned when the site is nearly flat.
    pub fn mean(&self, part: &Partition) -> Result<Vec<f64>> {
        match &self.precision {
            BlockMats::Diag(p) => Ok(self.info.iter().zip(p).map(|(h, p)| h / p).collect()),
            BlockMats::Full(blocks) => {
                let mut out = vec![0.0; self.info.len()];
                for (blk, b) in part.blocks().iter().zip(blocks) {
                    let h = DVector::from_iterator(blk.len(), blk.indices.iter().map(|&i| self.info[i]));
                    let m = factor_spd(b)?.solve(&h);
                    for (k, &i) in blk.indices.iter().enumerate() {
                        out[i] = m[k];
                    }
                }
                Ok(out)
            }
        }
    }

    /// Moment-form view; fails if the precision is singular.
    pub fn to_gaussian(&self, part: &Arc<Partition>) -> Result<StructuredGaussian> {
        StructuredGaussian::new(self.mean(part)?, self.precision.inverse()?.to_structured(part))
    }
}

/// Moments of `Q(x) ∝ q_x0(x) q_x1(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub mean: Vec<f64>,
    pub cov: BlockMats,
}

impl Joint {
    pub fn variances(&self, part: &Partition) -> Vec<f64> {
        self.cov.diagonal(part)
    }
}

pub fn joint_moments(a: &Site, b: &Site, part: &Partition) -> Result<Joint> {
    Error::check_len(a.info.len(), b.info.len())?;
    match (&a.precision, &b.precision) {
        (BlockMats::Diag(pa), BlockMats::Diag(pb)) => {
            let n = pa.len();
            let mut mean = Vec::with_capacity(n);
            let mut var = Vec::with_capacity(n);
            for i in 0..n {
                let p = pa[i] + pb[i];
                if !(p > 0.0 && p.is_finite()) {
                    return Err(Error::NotPositiveDefinite(format!("joint precision at pixel {i}")));
                }
                mean.push((a.info[i] + b.info[i]) / p);
                var.push(1.0 / p);
            }
            Ok(Joint {
                mean,
                cov: BlockMats::Diag(var),
            })
        }
        (BlockMats::Full(ba), BlockMats::Full(bb)) => {
            let (ha, hb) = (&a.info, &b.info);
            let mut mean = vec![0.0; ha.len()];
            let mut covs = Vec::with_capacity(ba.len());
            for (j, (pa, pb)) in ba.iter().zip(bb).enumerate() {
                let blk = &part.blocks()[j];
                let ch = factor_spd(&(pa + pb))?;
                let h = DVector::from_iterator(blk.len(), blk.indices.iter().map(|&i| ha[i] + hb[i]));
                let m = ch.solve(&h);
                for (k, &i) in blk.indices.iter().enumerate() {
                    mean[i] = m[k];
                }
                let mut c = ch.inverse();
                linalg::symmetrize(&mut c);
                covs.push(c);
            }
            Ok(Joint {
                mean,
                cov: BlockMats::Full(covs),
            })
        }
        _ => Err(Error::invalid("sites have different covariance structures")),
    }
}

/// Squared changes `(‖Δm‖², ‖Δ diag Σ‖²)` between two joints.
pub fn joint_change(prev: &Joint, next: &Joint, part: &Partition) -> (f64, f64) {
    (
        linalg::sq_dist(&prev.mean, &next.mean),
        linalg::sq_dist(&prev.variances(part), &next.variances(part)),
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub block_failures: usize,
    pub kl_iterations: usize,
}

/// New block precision and information vector before damping.
fn full_block_target(
    tilted_mean: &DVector<f64>,
    tilted_cov: &DMatrix<f64>,
    cav_p: &DMatrix<f64>,
    cav_h: &DVector<f64>,
    old_p: &DMatrix<f64>,
    cfg: &EpConfig,
) -> Result<(DMatrix<f64>, DVector<f64>, usize)> {
    let out = kl::update_block_precision(
        &BlockKlProblem {
            tilted_cov: tilted_cov.clone(),
            cavity_precision: cav_p.clone(),
            initial_precision: old_p.clone(),
            structure: BlockStructure::FullBlock,
        },
        cfg.kl_max_iters,
        cfg.kl_tol,
    )?;
    // site mean from moment matching, kept in natural form: h = (Ω + Ω_cav) E − h_cav
    let info = (&out.precision + cav_p) * tilted_mean - cav_h;
    Ok((out.precision, info, out.iterations))
}

fn damp_full(
    new_p: DMatrix<f64>,
    new_h: DVector<f64>,
    old_p: &DMatrix<f64>,
    old_h: &DVector<f64>,
    eps: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    if eps >= 1.0 {
        return (new_p, new_h);
    }
    let mut p = new_p * eps + old_p * (1.0 - eps);
    linalg::symmetrize(&mut p);
    (p, new_h * eps + old_h * (1.0 - eps))
}

/// Scalar site update `p = max(1/d − p_cav, floor)`, `h = (p + p_cav) e − h_cav`, then damping.
fn diag_target(e: f64, d: f64, cav_p: f64, cav_h: f64, old_p: f64, old_h: f64, eps: f64) -> Result<(f64, f64)> {
    let p = kl::diag_kl_update(d, cav_p)?;
    let h = (p + cav_p) * e - cav_h;
    if !h.is_finite() {
        return Err(Error::invalid("non-finite site parameters"));
    }
    Ok((eps * p + (1.0 - eps) * old_p, eps * h + (1.0 - eps) * old_h))
}

/// Moment-matching update of `site` against per-block tilted moments, with `cavity` fixed.
///
/// `tilted(j)` returns the tilted mean and covariance of block `j`; failed blocks keep their old values.
fn update_site<F>(site: &mut Site, cavity: &Site, part: &Partition, eps: f64, cfg: &EpConfig, mut tilted: F) -> UpdateStats
where
    F: FnMut(usize, &DMatrix<f64>, &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>,
{
    let mut stats = UpdateStats::default();
    for (j, blk) in part.blocks().iter().enumerate() {
        let cav_p = cavity.precision.block(part, j);
        let cav_h = DVector::from_iterator(blk.len(), blk.indices.iter().map(|&i| cavity.info[i]));
        let old_h = DVector::from_iterator(blk.len(), blk.indices.iter().map(|&i| site.info[i]));
        let result = tilted(j, &cav_p, &cav_h).and_then(|(e, c)| match &mut site.precision {
            BlockMats::Diag(p) => {
                let mut vals = Vec::with_capacity(blk.len());
                for (k, &i) in blk.indices.iter().enumerate() {
                    vals.push(diag_target(e[k], c[(k, k)], cav_p[(k, k)], cav_h[k], p[i], old_h[k], eps)?);
                }
                for (&i, (pv, hv)) in blk.indices.iter().zip(vals) {
                    p[i] = pv;
                    site.info[i] = hv;
                }
                Ok(0)
            }
            BlockMats::Full(blocks) => {
                let (np, nh, it) = full_block_target(&e, &c, &cav_p, &cav_h, &blocks[j], cfg)?;
                let (dp, dh) = damp_full(np, nh, &blocks[j], &old_h, eps);
                blocks[j] = dp;
                for (k, &i) in blk.indices.iter().enumerate() {
                    site.info[i] = dh[k];
                }
                Ok(it)
            }
        });
        match result {
            Ok(it) => stats.kl_iterations += it,
            Err(e) => {
                warn!("block {j}: update failed ({e}); keeping previous factor");
                stats.block_failures += 1;
            }
        }
    }
    stats
}

/// Updates `q_x0` against the GMM tilted distributions; returns per-block posterior weights.
pub fn update_prior_site(
    x0: &mut Site,
    x1: &Site,
    priors: &[Arc<PreparedGmm>],
    part: &Partition,
    eps: f64,
    cfg: &EpConfig,
) -> Result<(Vec<Vec<f64>>, UpdateStats)> {
    Error::check_len(part.num_blocks(), priors.len())?;
    let mut weights = vec![Vec::new(); part.num_blocks()];
    let stats = update_site(x0, x1, part, eps, cfg, |j, cav_p, cav_h| {
        let t = priors[j].tilted_info(cav_h, cav_p, false)?;
        weights[j] = t.weights;
        Ok((t.mean, t.cov))
    });
    Ok((weights, stats))
}

/// Updates `q_x1` from already computed tilted moments of `P1`.
pub fn update_likelihood_site(x1: &mut Site, x0: &Site, tilted: &TiltedP1, part: &Partition, eps: f64, cfg: &EpConfig) -> UpdateStats {
    update_site(x1, x0, part, eps, cfg, |j, _, _| {
        let blk = &part.blocks()[j];
        let e = DVector::from_iterator(blk.len(), blk.indices.iter().map(|&i| tilted.mean[i]));
        Ok((e, tilted.cov.block(part, j)))
    })
}

/// A linear-Gaussian data term `N(z; Hx, W⁻¹)` with diagonal `W`.
#[derive(Clone, Debug)]
pub struct GaussianData<'a> {
    pub op: &'a DegradationOperator,
    pub weights: Vec<f64>,
    pub target: Vec<f64>,
}

impl GaussianData<'_> {
    fn normal_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut hv = self.op.apply(v)?;
        for (a, w) in hv.iter_mut().zip(&self.weights) {
            *a *= w;
        }
        self.op.apply_adjoint(&hv)
    }

    /// Diagonal of `HᵀWH` when `H` is diagonal.
    fn diagonal_gram(&self) -> Option<Vec<f64>> {
        self.op.diagonal().map(|h| h.iter().zip(&self.weights).map(|(h, w)| w * h * h).collect())
    }
}

/// Mean and marginal block covariances of `P1(x) ∝ q_x0(x) N(z; Hx, W⁻¹)`.
#[derive(Clone, Debug)]
pub struct TiltedP1 {
    pub mean: Vec<f64>,
    pub cov: BlockMats,
    pub cg_iterations: usize,
    pub cg_residual: f64,
    pub cg_converged: bool,
    /// RBMC linear-solve solutions, one per sample; empty for diagonal `H`.
    pub samples: Vec<Vec<f64>>,
}

/// Exact per-block `(HᵀWH + Ω0)_jj` for diagonal `H`; the system then decouples block by block.
fn tilted_p1_diagonal(x0: &Site, data: &GaussianData, gram: &[f64], part: &Partition) -> Result<TiltedP1> {
    let n = part.pixel_count();
    let hwz = data.op.apply_adjoint(&data.weights.iter().zip(&data.target).map(|(w, z)| w * z).collect::<Vec<_>>())?;
    let info0 = &x0.info;
    let mut mean = vec![0.0; n];
    let cov = match &x0.precision {
        BlockMats::Diag(p) => {
            let mut var = vec![0.0; n];
            for i in 0..n {
                let q = p[i] + gram[i];
                mean[i] = (info0[i] + hwz[i]) / q;
                var[i] = 1.0 / q;
            }
            BlockMats::Diag(var)
        }
        BlockMats::Full(blocks) => {
            let mut covs = Vec::with_capacity(blocks.len());
            for (blk, p0) in part.blocks().iter().zip(blocks) {
                let mut q = p0.clone();
                for (k, &i) in blk.indices.iter().enumerate() {
                    q[(k, k)] += gram[i];
                }
                let ch = factor_spd(&q)?;
                let rhs = DVector::from_iterator(blk.len(), blk.indices.iter().map(|&i| info0[i] + hwz[i]));
                let m = ch.solve(&rhs);
                for (k, &i) in blk.indices.iter().enumerate() {
                    mean[i] = m[k];
                }
                let mut c = ch.inverse();
                linalg::symmetrize(&mut c);
                covs.push(c);
            }
            BlockMats::Full(covs)
        }
    };
    Ok(TiltedP1 {
        mean,
        cov,
        cg_iterations: 0,
        cg_residual: 0.0,
        cg_converged: true,
        samples: Vec::new(),
    })
}

/// Tilted `P1` moments: exact for diagonal `H`, otherwise CG for the mean and
/// Rao–Blackwellized Monte Carlo for the marginal blocks.
///
/// `stream` identifies the random stream (expert, iteration, ...) under `cfg.seed`.
/// Linear solves start from the solutions in `previous` when given.
pub fn tilted_p1(
    x0: &Site,
    data: &GaussianData,
    part: &Partition,
    cfg: &EpConfig,
    stream: &[u64],
    previous: Option<&TiltedP1>,
) -> Result<TiltedP1> {
    let n = part.pixel_count();
    Error::check_len(n, data.op.len())?;
    Error::check_len(n, data.weights.len())?;
    Error::check_len(n, data.target.len())?;
    if let Some(gram) = data.diagonal_gram() {
        return tilted_p1_diagonal(x0, data, &gram, part);
    }
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut out = data.normal_matvec(v).expect("length checked");
        for (o, p) in out.iter_mut().zip(x0.precision.matvec(part, v)) {
            *o += p;
        }
        out
    };
    let wz: Vec<f64> = data.weights.iter().zip(&data.target).map(|(w, z)| w * z).collect();
    let mut rhs = data.op.apply_adjoint(&wz)?;
    for (r, h) in rhs.iter_mut().zip(&x0.info) {
        *r += h;
    }
    let mut qmat = Vec::with_capacity(part.num_blocks());
    let mut qjj = Vec::with_capacity(part.num_blocks());
    let mut chol0 = Vec::with_capacity(part.num_blocks());
    for (j, blk) in part.blocks().iter().enumerate() {
        let p0 = x0.precision.block(part, j);
        let q = data.op.weighted_gram_block(&blk.indices, &data.weights)? + &p0;
        qjj.push(factor_spd(&q)?);
        qmat.push(q);
        chol0.push(factor_spd(&p0)?.l());
    }
    let qinv = BlockMats::Full(qjj.iter().map(|ch| ch.inverse()).collect());
    let precond = |r: &[f64]| qinv.matvec(part, r);
    let cg = preconditioned_cg(apply, precond, &rhs, previous.map(|p| &p.mean[..]), cfg.cg_tol, cfg.cg_max_iters);
    if !cg.converged {
        warn!(
            "CG stopped after {} iterations with relative residual {:.3e}",
            cg.iterations, cg.relative_residual
        );
    }

    let sqrt_w: Vec<f64> = data.weights.iter().map(|w| w.sqrt()).collect();
    let mut acc: Vec<DMatrix<f64>> = part.blocks().iter().map(|b| DMatrix::zeros(b.len(), b.len())).collect();
    let s_count = cfg.rbmc_samples;
    let mut cg_iterations = cg.iterations;
    let mut samples = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let mut keys = stream.to_vec();
        keys.push(s as u64);
        let mut rng = rng::stream(cfg.seed, &keys);
        let e1: Vec<f64> = (0..n).map(|i| sqrt_w[i] * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        let mut w = data.op.apply_adjoint(&e1)?;
        for (blk, l) in part.blocks().iter().zip(&chol0) {
            let e2 = DVector::from_iterator(blk.len(), (0..blk.len()).map(|_| StandardNormal.sample(&mut rng)));
            let le = l * e2;
            for (k, &i) in blk.indices.iter().enumerate() {
                w[i] += le[k];
            }
        }
        let start = previous.and_then(|p| p.samples.get(s)).map(|v| &v[..]);
        let sol = preconditioned_cg(apply, precond, &w, start, cfg.cg_tol, cfg.cg_max_iters);
        cg_iterations += sol.iterations;
        let x = sol.solution;
        let qx = apply(&x);
        for (j, blk) in part.blocks().iter().enumerate() {
            let xj = DVector::from_iterator(blk.len(), blk.indices.iter().map(|&i| x[i]));
            let own = &qmat[j] * &xj;
            let v = DVector::from_iterator(blk.len(), blk.indices.iter().enumerate().map(|(k, &i)| qx[i] - own[k]));
            acc[j].ger(1.0, &v, &v, 1.0);
        }
        samples.push(x);
    }
    let BlockMats::Full(inverses) = qinv else { unreachable!("built as full blocks") };
    let mut covs = Vec::with_capacity(part.num_blocks());
    for (inv, a) in inverses.iter().zip(&acc) {
        let mut c = inv + inv * (a / s_count as f64) * inv;
        linalg::symmetrize(&mut c);
        covs.push(linalg::psd_project(&c, 1e-10));
    }
    let cov = match x0.precision.structure() {
        BlockStructure::FullBlock => BlockMats::Full(covs),
        BlockStructure::Diagonal => BlockMats::Diag(BlockMats::Full(covs).diagonal(part)),
    };
    Ok(TiltedP1 {
        mean: cg.solution,
        cov,
        cg_iterations,
        cg_residual: cg.relative_residual,
        cg_converged: cg.converged,
        samples,
    })
}

/// Closed-form `q_x1` for diagonal `H`: precision `max(w h², 1e-8)` and the moment-matched mean.
///
/// This is the exact EP fixed point for the likelihood site, so it is assigned without damping.
pub fn likelihood_site_shortcut(x0: &Site, data: &GaussianData, part: &Partition) -> Result<Option<Site>> {
    let Some(gram) = data.diagonal_gram() else {
        return Ok(None);
    };
    let tilted = tilted_p1_diagonal(x0, data, &gram, part)?;
    let prec: Vec<f64> = gram.iter().map(|g| g.max(PRECISION_FLOOR)).collect();
    let omega0_e = x0.precision.matvec(part, &tilted.mean);
    // h1 = (Ω1 + Ω0) E − h0
    let info = (0..prec.len())
        .map(|i| prec[i] * tilted.mean[i] + omega0_e[i] - x0.info[i])
        .collect();
    Ok(Some(Site {
        info,
        precision: BlockMats::from_diagonal(part, x0.precision.structure(), &prec),
    }))
}

/// One record per EP iteration, serialized as a JSON line.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub delta_mean_sq: f64,
    pub delta_var_sq: f64,
    pub cg_iterations: usize,
    pub cg_residual: f64,
    pub block_failures: usize,
    pub kl_iterations: usize,
    pub x0_seconds: f64,
    pub x1_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub u_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub escapes: Option<usize>,
}

impl IterationRecord {
    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            x0_seconds: 0.0,
            x1_seconds: 0.0,
            u_seconds: self.u_seconds.map(|_| 0.0),
            ..self.clone()
        }
    }
}

/// Moments of `Q(u) ∝ q_u0(u) q_u1(u)` from the Poisson loop.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UMoments {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    pub c1: f64,
}

/// Result of one EP run for a single partition.
#[derive(Clone, Debug)]
pub struct EpResult {
    pub mean: Vec<f64>,
    pub cov: BlockMats,
    pub weights: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<IterationRecord>,
    pub prior_site: Site,
    pub likelihood_site: Site,
    pub u: Option<UMoments>,
}

impl EpResult {
    pub fn variances(&self, part: &Partition) -> Vec<f64> {
        self.cov.diagonal(part)
    }

    pub fn joint(&self) -> Joint {
        Joint {
            mean: self.mean.clone(),
            cov: self.cov.clone(),
        }
    }
}

/// RBMC stream keys for iteration `t`.
pub(crate) fn iteration_keys(stream: &[u64], t: usize, cfg: &EpConfig) -> Vec<u64> {
    let mut keys = stream.to_vec();
    if cfg.rbmc_resample {
        keys.push(t as u64);
    }
    keys
}

pub(crate) fn converged(dm: f64, dv: f64, n: usize, cfg: &EpConfig) -> bool {
    let bound = cfg.stop_threshold * n as f64;
    dm < bound && dv < bound
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::Kernel;

    fn part4() -> Partition {
        Partition::new(4, 4, 2, (0, 0)).unwrap()
    }

    #[test]
    fn joint_of_diagonal_sites() {
        let p = part4();
        let a = Site::from_moments(&p, BlockStructure::Diagonal, &[1.0; 16], &[1.0; 16]);
        let b = Site::from_moments(&p, BlockStructure::Diagonal, &[3.0; 16], &[1.0; 16]);
        let j = joint_moments(&a, &b, &p).unwrap();
        assert!(j.mean.iter().all(|&m| (m - 2.0).abs() < 1e-15));
        assert!(j.variances(&p).iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let af = Site::from_moments(&p, BlockStructure::FullBlock, &[1.0; 16], &[1.0; 16]);
        let bf = Site::from_moments(&p, BlockStructure::FullBlock, &[3.0; 16], &[1.0; 16]);
        let jf = joint_moments(&af, &bf, &p).unwrap();
        assert!(linalg::sq_dist(&jf.mean, &j.mean) < 1e-28);
    }

    #[test]
    fn tilted_p1_identity_is_exact() {
        let p = part4();
        let op = DegradationOperator::identity(4, 4);
        let x0 = Site::from_moments(&p, BlockStructure::FullBlock, &[0.5; 16], &[2.0; 16]);
        let y: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let data = GaussianData {
            op: &op,
            weights: vec![4.0; 16],
            target: y.clone(),
        };
        let t = tilted_p1(&x0, &data, &p, &EpConfig::default(), &[0], None).unwrap();
        for i in 0..16 {
            assert!((t.mean[i] - (0.25 + 4.0 * y[i]) / 4.5).abs() < 1e-12);
        }
        assert!(t.cov.diagonal(&p).iter().all(|&v| (v - 1.0 / 4.5).abs() < 1e-12));
    }

    #[test]
    fn rbmc_is_close_for_blur() {
        let p = Partition::new(8, 8, 2, (0, 0)).unwrap();
        let op = DegradationOperator::conv2d(8, 8, Kernel::uniform(3).unwrap()).unwrap();
        let x0 = Site::from_moments(&p, BlockStructure::FullBlock, &[0.0; 64], &[0.5; 64]);
        let data = GaussianData {
            op: &op,
            weights: vec![100.0; 64],
            target: vec![0.3; 64],
        };
        let cfg = EpConfig {
            rbmc_samples: 400,
            ..EpConfig::default()
        };
        let t = tilted_p1(&x0, &data, &p, &cfg, &[1], None).unwrap();
        let h = op.to_dense().unwrap();
        let q = h.transpose() * &h * 100.0 + DMatrix::identity(64, 64) * 2.0;
        let inv = q.try_inverse().unwrap();
        let d = t.cov.diagonal(&p);
        for i in 0..64 {
            assert!((d[i] - inv[(i, i)]).abs() / inv[(i, i)] < 0.1);
        }
        assert!(t.cg_converged);
    }
}
