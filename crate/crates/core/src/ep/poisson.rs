//! Data-augmented EP for `y_n ~ Poisson(max(u_n, 0))`, `u = Hx`.
//!
//! The graph has four factors: `q_u0` (diagonal, from the likelihood),
//! `q_u1` (isotropic, from the constraint `u = Hx`), and the x-side pair
//! `q_x1` / `q_x0` shared with the Gaussian loop.

use std::sync::Arc;
use std::time::Instant;

use log::warn;

use crate::error::{Error, Result};
use crate::forward::DegradationOperator;
use crate::gmm::{prepare_for_partition, AdaptedGmm, PreparedGmm};
use crate::kl::{self, PRECISION_FLOOR};
use crate::partition::Partition;
use crate::rectified::{rectified_poisson_tilted, TiltedMoments};

use super::{
    converged, iteration_keys, joint_change, joint_moments, likelihood_site_shortcut, resolve_structure, tilted_p1,
    update_likelihood_site, update_prior_site, BlockMats, EpConfig, EpResult, GaussianData, IterationRecord, Joint,
    Site, TiltedP1, UCavity, UMoments, UpdateStats,
};

/// Variance assigned to `q_u0` when moment matching asks for a negative one.
pub const ESCAPE_VARIANCE: f64 = 1e8;

/// Per-pixel likelihood on `u` for the augmented graph.
pub trait ULikelihood {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Moments of `p(y_n | u) N(u; mean, var)`.
    fn tilted(&self, n: usize, mean: f64, var: f64) -> Result<TiltedMoments>;
}

/// Rectified Poisson counts.
#[derive(Clone, Debug)]
pub struct PoissonCounts<'a>(pub &'a [f64]);

impl ULikelihood for PoissonCounts<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn tilted(&self, n: usize, mean: f64, var: f64) -> Result<TiltedMoments> {
        rectified_poisson_tilted(self.0[n], mean, var)
    }
}

/// `y_n ~ N(u_n, σ²)`; makes the augmented graph reproduce the Gaussian loop.
#[derive(Clone, Debug)]
pub struct GaussianObservation<'a> {
    pub y: &'a [f64],
    pub variance: f64,
}

impl ULikelihood for GaussianObservation<'_> {
    fn len(&self) -> usize {
        self.y.len()
    }

    fn tilted(&self, n: usize, mean: f64, var: f64) -> Result<TiltedMoments> {
        let s = var + self.variance;
        let v = 1.0 / (1.0 / var + 1.0 / self.variance);
        let d = self.y[n] - mean;
        Ok(TiltedMoments {
            log_z: -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + d * d / s),
            mean: v * (mean / var + self.y[n] / self.variance),
            var: v,
            ok: true,
        })
    }
}

/// Starting point of the augmented loop.
#[derive(Clone, Debug)]
pub struct AugmentedInit {
    pub x_mean: Vec<f64>,
    pub x_var: Vec<f64>,
    pub u0_mean: Vec<f64>,
    pub c0: Vec<f64>,
    pub u1_mean: Vec<f64>,
    pub c1: f64,
}

impl AugmentedInit {
    /// Every mean at `y + 1`, every variance at `y + 1`; the isotropic `c1` takes their average.
    pub fn from_counts(y: &[f64]) -> Self {
        let v: Vec<f64> = y.iter().map(|c| c + 1.0).collect();
        let c1 = v.iter().sum::<f64>() / v.len().max(1) as f64;
        Self {
            x_mean: v.clone(),
            x_var: v.clone(),
            u0_mean: v.clone(),
            c0: v.clone(),
            u1_mean: v,
            c1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpPoissonState {
    pub x0: Site,
    pub x1: Site,
    pub joint: Joint,
    pub u0_mean: Vec<f64>,
    pub c0: Vec<f64>,
    pub u1_mean: Vec<f64>,
    pub c1: f64,
    pub weights: Vec<Vec<f64>>,
    pub iteration: usize,
    warm_start: Option<TiltedP1>,
}

impl EpPoissonState {
    pub fn new(init: &AugmentedInit, op: &DegradationOperator, part: &Partition, cfg: &EpConfig) -> Result<Self> {
        let n = part.pixel_count();
        for len in [
            op.len(),
            init.x_mean.len(),
            init.x_var.len(),
            init.u0_mean.len(),
            init.c0.len(),
            init.u1_mean.len(),
        ] {
            Error::check_len(n, len)?;
        }
        if init.x_var.iter().chain(&init.c0).chain([&init.c1]).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("initial variances must be positive"));
        }
        let structure = resolve_structure(cfg.structure, op);
        let x0 = Site::from_moments(part, structure, &init.x_mean, &init.x_var);
        let x1 = x0.clone();
        let joint = joint_moments(&x0, &x1, part)?;
        Ok(Self {
            x0,
            x1,
            joint,
            u0_mean: init.u0_mean.clone(),
            c0: init.c0.clone(),
            u1_mean: init.u1_mean.clone(),
            c1: init.c1,
            weights: vec![Vec::new(); part.num_blocks()],
            iteration: 0,
            warm_start: None,
        })
    }

    pub fn sync(&mut self, part: &Partition) -> Result<()> {
        self.joint = joint_moments(&self.x0, &self.x1, part)?;
        Ok(())
    }

    /// Moment matching of `q_u0` against the likelihood with cavity `q_u1`; returns the escape count.
    pub fn update_q_u0(&mut self, lik: &dyn ULikelihood, eps: f64) -> Result<usize> {
        Error::check_len(self.c0.len(), lik.len())?;
        let c1 = self.c1;
        let mut escapes = 0;
        for n in 0..self.c0.len() {
            let m1 = self.u1_mean[n];
            let t = lik.tilted(n, m1, c1)?;
            let p_new = 1.0 / t.var - 1.0 / c1;
            let c0_new = if t.ok && p_new > 0.0 && p_new.is_finite() {
                1.0 / p_new
            } else {
                escapes += 1;
                ESCAPE_VARIANCE
            };
            let mu_new = c0_new * (t.mean * (1.0 / c0_new + 1.0 / c1) - m1 / c1);
            let p_old = 1.0 / self.c0[n];
            let p = eps / c0_new + (1.0 - eps) * p_old;
            let h = eps * mu_new / c0_new + (1.0 - eps) * p_old * self.u0_mean[n];
            if !(p > 0.0 && (h / p).is_finite()) {
                warn!("pixel {n}: q_u0 update produced non-finite moments; keeping previous factor");
                continue;
            }
            self.c0[n] = 1.0 / p;
            self.u0_mean[n] = h / p;
        }
        Ok(escapes)
    }

    fn data<'a>(&self, op: &'a DegradationOperator) -> GaussianData<'a> {
        GaussianData {
            op,
            weights: self.c0.iter().map(|c| 1.0 / c).collect(),
            target: self.u0_mean.clone(),
        }
    }

    pub fn tilted_p1_moments(&self, op: &DegradationOperator, part: &Partition, cfg: &EpConfig, stream: &[u64]) -> Result<TiltedP1> {
        tilted_p1(&self.x0, &self.data(op), part, cfg, stream, self.warm_start.as_ref())
    }

    /// `q_x1` from `P1(x) ∝ q_x0(x) q_u0(Hx)`; closed form for diagonal `H`.
    pub fn update_q_x1_poisson(
        &mut self,
        op: &DegradationOperator,
        part: &Partition,
        eps: f64,
        cfg: &EpConfig,
        stream: &[u64],
    ) -> Result<(UpdateStats, Option<TiltedP1>)> {
        if let Some(site) = likelihood_site_shortcut(&self.x0, &self.data(op), part)? {
            self.x1 = site;
            self.sync(part)?;
            return Ok((UpdateStats::default(), None));
        }
        let tilted = self.tilted_p1_moments(op, part, cfg, stream)?;
        let stats = update_likelihood_site(&mut self.x1, &self.x0, &tilted, part, eps, cfg);
        self.warm_start = Some(tilted.clone());
        self.sync(part)?;
        Ok((stats, Some(tilted)))
    }

    /// Isotropic `q_u1` from the marginals of `h_n x` under the current joint.
    pub fn update_q_u1(&mut self, op: &DegradationOperator, part: &Partition, eps: f64, mode: UCavity) -> Result<()> {
        let n_pix = self.c0.len();
        let mut tilted = Vec::with_capacity(n_pix);
        for n in 0..n_pix {
            let s = match &self.joint.cov {
                BlockMats::Diag(v) => op.row_quadratic_form_diag(n, v)?,
                BlockMats::Full(b) => op.row_quadratic_form(n, part, b)?,
            };
            if !(s > 0.0) {
                tilted.push(None);
                continue;
            }
            let t = op.row_dot(n, &self.joint.mean)?;
            let (c0, mu0) = (self.c0[n], self.u0_mean[n]);
            let (s, t) = match mode {
                UCavity::Downdated if s < c0 * (1.0 - 1e-12) => (s * c0 / (c0 - s), (c0 * t - s * mu0) / (c0 - s)),
                _ => (s, t),
            };
            let var = 1.0 / (1.0 / c0 + 1.0 / s);
            tilted.push(Some((var * (mu0 / c0 + t / s), var)));
        }
        let (vars, cav): (Vec<f64>, Vec<f64>) =
            tilted.iter().zip(&self.c0).filter_map(|(t, c0)| t.map(|(_, v)| (v, 1.0 / c0))).unzip();
        if vars.is_empty() {
            return Err(Error::invalid("operator has no non-zero rows"));
        }
        let p_old = 1.0 / self.c1;
        let p_new = kl::iso_kl_update(&vars, &cav, p_old)?.max(PRECISION_FLOOR);
        let c1_new = 1.0 / p_new;
        let p = eps * p_new + (1.0 - eps) * p_old;
        for (n, t) in tilted.iter().enumerate() {
            let (c0, mu0) = (self.c0[n], self.u0_mean[n]);
            let m_new = match t {
                Some((e, _)) => c1_new * ((1.0 / c1_new + 1.0 / c0) * e - mu0 / c0),
                None => mu0,
            };
            self.u1_mean[n] = (eps * p_new * m_new + (1.0 - eps) * p_old * self.u1_mean[n]) / p;
        }
        self.c1 = 1.0 / p;
        Ok(())
    }

    pub fn update_q_x0(&mut self, priors: &[Arc<PreparedGmm>], part: &Partition, eps: f64, cfg: &EpConfig) -> Result<UpdateStats> {
        let (weights, stats) = update_prior_site(&mut self.x0, &self.x1, priors, part, eps, cfg)?;
        self.weights = weights;
        self.sync(part)?;
        Ok(stats)
    }

    pub fn u_moments(&self) -> UMoments {
        let p1 = 1.0 / self.c1;
        let (mean, variances) = self
            .c0
            .iter()
            .zip(&self.u0_mean)
            .zip(&self.u1_mean)
            .map(|((c0, m0), m1)| {
                let p = 1.0 / c0 + p1;
                ((m0 / c0 + m1 * p1) / p, 1.0 / p)
            })
            .unzip();
        UMoments {
            mean,
            variances,
            c1: self.c1,
        }
    }
}

pub fn run_ep_poisson(y: &[f64], op: &DegradationOperator, gmm: &AdaptedGmm, part: &Partition, cfg: &EpConfig) -> Result<EpResult> {
    let priors = prepare_for_partition(gmm, part)?;
    run_ep_poisson_prepared(y, op, &priors, part, cfg, &[])
}

pub fn run_ep_poisson_prepared(
    y: &[f64],
    op: &DegradationOperator,
    priors: &[Arc<PreparedGmm>],
    part: &Partition,
    cfg: &EpConfig,
    stream: &[u64],
) -> Result<EpResult> {
    if !op.kernel_nonnegative() {
        return Err(Error::invalid("Poisson restoration needs a non-negative operator"));
    }
    run_augmented(&PoissonCounts(y), &AugmentedInit::from_counts(y), op, priors, part, cfg, stream)
}

/// The four-step loop `q_u0 → q_x1 → q_u1 → q_x0` for any per-pixel likelihood on `u`.
pub fn run_augmented(
    lik: &dyn ULikelihood,
    init: &AugmentedInit,
    op: &DegradationOperator,
    priors: &[Arc<PreparedGmm>],
    part: &Partition,
    cfg: &EpConfig,
    stream: &[u64],
) -> Result<EpResult> {
    cfg.validate()?;
    Error::check_len(part.pixel_count(), lik.len())?;
    let mut state = EpPoissonState::new(init, op, part, cfg)?;
    let mut trace = Vec::new();
    let mut done = false;
    for t in 1..=cfg.max_iters {
        state.iteration = t;
        let eps = cfg.damping_at(t);
        let prev = state.joint.clone();

        let start = Instant::now();
        let escapes = state.update_q_u0(lik, eps)?;
        let mut u_seconds = start.elapsed().as_secs_f64();

        let start = Instant::now();
        let keys = iteration_keys(stream, t, cfg);
        let (s1, tilted) = state.update_q_x1_poisson(op, part, eps, cfg, &keys)?;
        let x1_seconds = start.elapsed().as_secs_f64();

        let start = Instant::now();
        state.update_q_u1(op, part, eps, cfg.u_cavity)?;
        u_seconds += start.elapsed().as_secs_f64();

        let start = Instant::now();
        let s0 = state.update_q_x0(priors, part, eps, cfg)?;
        let x0_seconds = start.elapsed().as_secs_f64();

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
            u_seconds: Some(u_seconds),
            c1: Some(state.c1),
            escapes: Some(escapes),
        });
        log::debug!("Poisson EP iteration {t}: |dm|^2={dm:.3e} |dv|^2={dv:.3e} c1={:.3e}", state.c1);
        if converged(dm, dv, part.pixel_count(), cfg) {
            done = true;
            break;
        }
    }
    let u = state.u_moments();
    Ok(EpResult {
        mean: state.joint.mean,
        cov: state.joint.cov,
        weights: state.weights,
        iterations: state.iteration,
        converged: done,
        trace,
        prior_site: state.x0,
        likelihood_site: state.x1,
        u: Some(u),
    })
}
