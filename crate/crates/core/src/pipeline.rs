//! Per-partition EP with hyperparameter re-estimation, followed by product-of-experts fusion.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ep::gaussian::run_ep_gaussian_prepared;
use crate::ep::poisson::run_ep_poisson_prepared;
use crate::ep::{EpConfig, EpResult, IterationRecord};
use crate::epem::{epem_m_step, initial_theta, theta_change, EStats, MStepOptions};
use crate::error::{Error, Result};
use crate::forward::{DegradationOperator, NoiseModel, OperatorSpec};
use crate::gmm::{adapt, prepare_for_partition, PatchGmm, Theta};
use crate::partition::{build_shifted_partitions, Partition};
use crate::poe::{fuse_poe, ExpertResult, FusedPosterior};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub ep: EpConfig,
    pub mstep: MStepOptions,
    /// Run the EM updates of `θ`; otherwise every expert keeps its initial value.
    pub estimate_theta: bool,
    /// Starting `θ`; estimated from the observation when absent.
    pub initial_theta: Option<Theta>,
    /// Estimate `θ` with the first expert only and hand it to the others.
    pub share_theta: bool,
    pub max_outer_rounds: usize,
    pub outer_tol: f64,
    /// Shifted partitions to run (indices into the `p²` shifts); all of them when absent.
    pub experts: Option<Vec<usize>>,
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ep: EpConfig::default(),
            mstep: MStepOptions::default(),
            estimate_theta: true,
            initial_theta: None,
            share_theta: false,
            max_outer_rounds: 10,
            outer_tol: 1e-3,
            experts: None,
            threads: 1,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.ep.validate()?;
        if self.max_outer_rounds == 0 || self.threads == 0 {
            return Err(Error::invalid("max_outer_rounds and threads must be at least 1"));
        }
        if !(self.outer_tol > 0.0) || !(self.mstep.tol > 0.0) || !(self.mstep.search_tol > 0.0) {
            return Err(Error::invalid("tolerances must be positive"));
        }
        if let Some(t) = &self.initial_theta {
            t.validate()?;
        }
        if matches!(&self.experts, Some(v) if v.is_empty()) {
            return Err(Error::invalid("expert list is empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertStatus {
    Converged,
    NotConverged,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpertReport {
    pub partition: usize,
    pub shift: (usize, usize),
    pub status: ExpertStatus,
    /// `θ` of the EP run that produced the expert's moments.
    pub theta: Option<Theta>,
    pub rounds: usize,
    pub ep_iterations: Vec<usize>,
    pub theta_converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Deterministic summary of a run; wall times live in [`Timing`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineReport {
    pub experts: Vec<ExpertReport>,
    pub fused_experts: usize,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fused_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observed_psnr: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Timing {
    pub expert_seconds: Vec<f64>,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceEntry {
    pub partition: usize,
    pub round: usize,
    #[serde(flatten)]
    pub record: IterationRecord,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub fused: FusedPosterior,
    pub experts: Vec<ExpertResult>,
    pub report: PipelineReport,
    pub timing: Timing,
    pub trace: Vec<TraceEntry>,
}

/// Observation model and data shared by every expert.
pub struct Problem<'a> {
    pub y: &'a [f64],
    pub op: &'a DegradationOperator,
    pub noise: NoiseModel,
    pub base: &'a PatchGmm,
}

impl Problem<'_> {
    fn patch_size(&self) -> Result<usize> {
        let d = self.base.dim();
        let p = (d as f64).sqrt().round() as usize;
        if p * p != d {
            return Err(Error::invalid(format!("mixture dimension {d} is not a square patch")));
        }
        Ok(p)
    }

    fn run_ep(&self, theta: Theta, part: &Partition, cfg: &EpConfig, stream: &[u64]) -> Result<EpResult> {
        let priors = prepare_for_partition(&adapt(self.base, theta)?, part)?;
        match self.noise {
            NoiseModel::Gaussian { variance } => {
                run_ep_gaussian_prepared(self.y, self.op, variance, &priors, part, cfg, stream)
            }
            NoiseModel::Poisson => run_ep_poisson_prepared(self.y, self.op, &priors, part, cfg, stream),
        }
    }

    fn start_theta(&self, part: &Partition, cfg: &PipelineConfig) -> Result<Theta> {
        if let Some(t) = cfg.initial_theta {
            return Ok(t);
        }
        let observed: Vec<bool> = match self.op.spec() {
            OperatorSpec::Mask { kept } => kept.clone(),
            _ => vec![true; self.y.len()],
        };
        let noise_var = match self.noise {
            NoiseModel::Gaussian { variance } => variance,
            NoiseModel::Poisson => {
                let n = observed.iter().filter(|o| **o).count().max(1);
                self.y.iter().zip(&observed).filter(|(_, o)| **o).map(|(v, _)| v).sum::<f64>() / n as f64
            }
        };
        initial_theta(self.base, part, self.y, &observed, noise_var)
    }
}

struct ExpertRun {
    result: Option<ExpertResult>,
    report: ExpertReport,
    trace: Vec<TraceEntry>,
    seconds: f64,
}

/// EP alternated with M-steps until `θ` settles; `fixed` skips estimation.
fn run_expert(problem: &Problem, index: usize, part: &Partition, cfg: &PipelineConfig, fixed: Option<Theta>) -> ExpertRun {
    let start = Instant::now();
    let mut report = ExpertReport {
        partition: index,
        shift: part.shift(),
        status: ExpertStatus::Failed,
        theta: None,
        rounds: 0,
        ep_iterations: Vec::new(),
        theta_converged: false,
        error: None,
    };
    let mut trace = Vec::new();
    let estimate = cfg.estimate_theta && fixed.is_none();
    let outcome = (|| -> Result<ExpertResult> {
        let mut theta = match fixed {
            Some(t) => t,
            None => problem.start_theta(part, cfg)?,
        };
        loop {
            report.rounds += 1;
            let round = report.rounds;
            let ep = problem.run_ep(theta, part, &cfg.ep, &[index as u64, round as u64])?;
            report.ep_iterations.push(ep.iterations);
            trace.extend(ep.trace.iter().map(|r| TraceEntry {
                partition: index,
                round,
                record: r.clone(),
            }));
            let mut done = !estimate || round >= cfg.max_outer_rounds;
            if estimate {
                let stats = EStats::new(problem.base, part, &ep.mean, &ep.cov, &ep.weights)?;
                let next = epem_m_step(&stats, theta, &cfg.mstep)?.theta;
                if theta_change(&theta, &next) < cfg.outer_tol {
                    report.theta_converged = true;
                    done = true;
                }
                if !done {
                    theta = next;
                }
            }
            if done {
                report.theta = Some(theta);
                report.status = if ep.converged { ExpertStatus::Converged } else { ExpertStatus::NotConverged };
                return Ok(ExpertResult {
                    partition: index,
                    variances: ep.variances(part),
                    mean: ep.mean,
                    theta,
                    weights: ep.weights,
                    iterations: ep.iterations,
                    converged: ep.converged,
                });
            }
        }
    })();
    let result = match outcome {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("expert {index} failed: {e}");
            report.status = ExpertStatus::Failed;
            report.error = Some(e.to_string());
            None
        }
    };
    ExpertRun {
        result,
        report,
        trace,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs experts in index order on `threads` workers; results are placed by index.
fn run_many(
    problem: &Problem,
    jobs: &[(usize, &Partition)],
    cfg: &PipelineConfig,
    fixed: Option<Theta>,
) -> Vec<ExpertRun> {
    let slots: Vec<Mutex<Option<ExpertRun>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let k = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(index, part)) = jobs.get(k) else { break };
        let run = run_expert(problem, index, part, cfg, fixed);
        *slots[k].lock().expect("slot lock") = Some(run);
    };
    let threads = cfg.threads.min(jobs.len()).max(1);
    if threads == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(work);
            }
        });
    }
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every job runs"))
        .collect()
}

pub fn run_pipeline(problem: &Problem, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    problem.noise.validate()?;
    Error::check_len(problem.op.len(), problem.y.len())?;
    let start = Instant::now();
    let p = problem.patch_size()?;
    let parts = build_shifted_partitions(problem.op.width(), problem.op.height(), p)?;
    let indices: Vec<usize> = match &cfg.experts {
        Some(v) => v.clone(),
        None => (0..parts.len()).collect(),
    };
    for &i in &indices {
        if i >= parts.len() {
            return Err(Error::IndexOutOfRange { index: i, len: parts.len() });
        }
    }
    let jobs: Vec<(usize, &Partition)> = indices.iter().map(|&i| (i, &parts[i])).collect();

    let runs = if cfg.share_theta && cfg.estimate_theta && jobs.len() > 1 {
        let mut first = run_many(problem, &jobs[..1], cfg, None);
        let theta = first[0].result.as_ref().map(|r| r.theta).ok_or_else(|| {
            Error::invalid(format!(
                "expert {} failed, no hyperparameters to share: {}",
                jobs[0].0,
                first[0].report.error.as_deref().unwrap_or("unknown error")
            ))
        })?;
        first.extend(run_many(problem, &jobs[1..], cfg, Some(theta)));
        first
    } else {
        run_many(problem, &jobs, cfg, None)
    };

    let mut experts = Vec::new();
    let mut reports = Vec::new();
    let mut trace = Vec::new();
    let mut timing = Timing::default();
    for run in runs {
        experts.extend(run.result);
        reports.push(run.report);
        trace.extend(run.trace);
        timing.expert_seconds.push(run.seconds);
    }
    if experts.is_empty() {
        return Err(Error::invalid("every expert failed"));
    }
    let fused = fuse_poe(&experts)?;
    timing.total_seconds = start.elapsed().as_secs_f64();
    let report = PipelineReport {
        fused_experts: experts.len(),
        converged: reports.iter().all(|r| r.status == ExpertStatus::Converged),
        experts: reports,
        fused_psnr: None,
        observed_psnr: None,
    };
    Ok(PipelineOutput {
        fused,
        experts,
        report,
        timing,
        trace,
    })
}
