//! EP for `y = Hx + n`, `n ~ N(0, σ²I)`, with a patch GMM prior.

use std::sync::Arc;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::forward::DegradationOperator;
use crate::gmm::{prepare_for_partition, AdaptedGmm, PreparedGmm};
use crate::partition::Partition;

use super::{
    converged, iteration_keys, joint_change, joint_moments, likelihood_site_shortcut, resolve_structure, tilted_p1,
    update_likelihood_site, update_prior_site, EpConfig, EpResult, GaussianData, IterationRecord, Joint, Site,
    TiltedP1, UpdateStats,
};

#[derive(Clone, Debug)]
pub struct EpGaussianState {
    pub x0: Site,
    pub x1: Site,
    pub joint: Joint,
    pub weights: Vec<Vec<f64>>,
    pub iteration: usize,
    warm_start: Option<TiltedP1>,
}

fn data<'a>(op: &'a DegradationOperator, y: &[f64], sigma2: f64) -> GaussianData<'a> {
    GaussianData {
        op,
        weights: vec![1.0 / sigma2; y.len()],
        target: y.to_vec(),
    }
}

impl EpGaussianState {
    /// Both sites start at `N(y, σ²I)`; for diagonal `H` the likelihood site
    /// is then replaced by its closed form, which it keeps for the whole run.
    pub fn new(y: &[f64], op: &DegradationOperator, sigma2: f64, part: &Partition, cfg: &EpConfig) -> Result<Self> {
        Error::check_len(part.pixel_count(), y.len())?;
        Error::check_len(op.len(), y.len())?;
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::invalid(format!("noise variance must be positive, got {sigma2}")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("observation contains non-finite values"));
        }
        let structure = resolve_structure(cfg.structure, op);
        let x0 = Site::from_moments(part, structure, y, &vec![sigma2; y.len()]);
        let x1 = match likelihood_site_shortcut(&x0, &data(op, y, sigma2), part)? {
            Some(s) => s,
            None => x0.clone(),
        };
        let joint = joint_moments(&x0, &x1, part)?;
        Ok(Self {
            x0,
            x1,
            joint,
            weights: vec![Vec::new(); part.num_blocks()],
            iteration: 0,
            warm_start: None,
        })
    }

    pub fn sync(&mut self, part: &Partition) -> Result<()> {
        self.joint = joint_moments(&self.x0, &self.x1, part)?;
        Ok(())
    }

    pub fn update_q_x0(&mut self, priors: &[Arc<PreparedGmm>], part: &Partition, eps: f64, cfg: &EpConfig) -> Result<UpdateStats> {
        let (weights, stats) = update_prior_site(&mut self.x0, &self.x1, priors, part, eps, cfg)?;
        self.weights = weights;
        self.sync(part)?;
        Ok(stats)
    }

    pub fn tilted_p1_moments(
        &self,
        op: &DegradationOperator,
        y: &[f64],
        sigma2: f64,
        part: &Partition,
        cfg: &EpConfig,
        stream: &[u64],
    ) -> Result<TiltedP1> {
        tilted_p1(&self.x0, &data(op, y, sigma2), part, cfg, stream, self.warm_start.as_ref())
    }

    pub fn update_q_x1(&mut self, tilted: &TiltedP1, part: &Partition, eps: f64, cfg: &EpConfig) -> Result<UpdateStats> {
        let stats = update_likelihood_site(&mut self.x1, &self.x0, tilted, part, eps, cfg);
        self.warm_start = Some(tilted.clone());
        self.sync(part)?;
        Ok(stats)
    }

    /// Full `q_x1` step: the closed form for diagonal `H`, otherwise tilted moments plus a damped update.
    #[allow(clippy::too_many_arguments)]
    pub fn step_q_x1(
        &mut self,
        op: &DegradationOperator,
        y: &[f64],
        sigma2: f64,
        part: &Partition,
        eps: f64,
        cfg: &EpConfig,
        stream: &[u64],
    ) -> Result<(UpdateStats, Option<TiltedP1>)> {
        if let Some(site) = likelihood_site_shortcut(&self.x0, &data(op, y, sigma2), part)? {
            self.x1 = site;
            self.sync(part)?;
            return Ok((UpdateStats::default(), None));
        }
        let tilted = self.tilted_p1_moments(op, y, sigma2, part, cfg, stream)?;
        let stats = self.update_q_x1(&tilted, part, eps, cfg)?;
        Ok((stats, Some(tilted)))
    }
}

pub fn run_ep_gaussian(
    y: &[f64],
    op: &DegradationOperator,
    sigma2: f64,
    gmm: &AdaptedGmm,
    part: &Partition,
    cfg: &EpConfig,
) -> Result<EpResult> {
    let priors = prepare_for_partition(gmm, part)?;
    run_ep_gaussian_prepared(y, op, sigma2, &priors, part, cfg, &[])
}

/// As [`run_ep_gaussian`] with per-block priors already prepared; `stream` prefixes every RBMC stream key.
pub fn run_ep_gaussian_prepared(
    y: &[f64],
    op: &DegradationOperator,
    sigma2: f64,
    priors: &[Arc<PreparedGmm>],
    part: &Partition,
    cfg: &EpConfig,
    stream: &[u64],
) -> Result<EpResult> {
    cfg.validate()?;
    let mut state = EpGaussianState::new(y, op, sigma2, part, cfg)?;
    let mut trace = Vec::new();
    let mut done = false;
    for t in 1..=cfg.max_iters {
        state.iteration = t;
        let eps = cfg.damping_at(t);
        let prev = state.joint.clone();

        let start = Instant::now();
        let s0 = state.update_q_x0(priors, part, eps, cfg)?;
        let x0_seconds = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let keys = iteration_keys(stream, t, cfg);
        let (s1, tilted) = state.step_q_x1(op, y, sigma2, part, eps, cfg, &keys)?;
        let x1_seconds = start.elapsed().as_secs_f64();

        let (dm, dv) = joint_change(&prev, &state.joint, part);
        let (cg_iterations, cg_residual) = tilted.map_or((0, 0.0), |t| (t.cg_iterations, t.cg_residual));
        trace.push(IterationRecord {
            iteration: t,
            delta_mean_sq: dm,
            delta_var_sq: dv,
            cg_iterations,
            cg_residual,
            block_failures: s0.block_failures + s1.block_failures,
            kl_iterations: s0.kl_iterations + s1.kl_iterations,
            x0_seconds,
            x1_seconds,
            ..IterationRecord::default()
        });
        log::debug!("EP iteration {t}: |dm|^2={dm:.3e} |dv|^2={dv:.3e}");
        if converged(dm, dv, part.pixel_count(), cfg) {
            done = true;
            break;
        }
    }
    Ok(EpResult {
        mean: state.joint.mean,
        cov: state.joint.cov,
        weights: state.weights,
        iterations: state.iteration,
        converged: done,
        trace,
        prior_site: state.x0,
        likelihood_site: state.x1,
        u: None,
    })
}
