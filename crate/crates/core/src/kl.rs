//! KL-minimizing Gaussian factor updates under structural covariance constraints.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, chol_logdet, frob_dot, try_cholesky};

/// Smallest precision a diagonal or isotropic factor may take.
pub const PRECISION_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockStructure {
    FullBlock,
    Diagonal,
}

#[derive(Clone, Debug)]
pub struct BlockKlProblem {
    pub tilted_cov: DMatrix<f64>,
    pub cavity_precision: DMatrix<f64>,
    pub initial_precision: DMatrix<f64>,
    pub structure: BlockStructure,
}

#[derive(Clone, Debug)]
pub struct BlockKlOutcome {
    pub precision: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Loss of the initial iterate followed by every accepted iterate.
    pub losses: Vec<f64>,
}

/// `−log det(Ω + Ω_cav) + ⟨Ω + Ω_cav, Cov_P⟩`.
pub fn kl_block_loss(omega: &DMatrix<f64>, omega_cav: &DMatrix<f64>, cov_p: &DMatrix<f64>) -> Result<f64> {
    let s = omega + omega_cav;
    let ch = try_cholesky(&s).ok_or_else(|| Error::NotPositiveDefinite("Ω + Ω_cav".into()))?;
    Ok(-chol_logdet(&ch) + frob_dot(&s, cov_p))
}

/// Gradient `Cov_P − (Ω + Ω_cav)⁻¹` of [`kl_block_loss`].
pub fn kl_block_gradient(omega: &DMatrix<f64>, omega_cav: &DMatrix<f64>, cov_p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = omega + omega_cav;
    let ch = try_cholesky(&s).ok_or_else(|| Error::NotPositiveDefinite("Ω + Ω_cav".into()))?;
    Ok(cov_p - ch.inverse())
}

/// Loss and (structure-projected) gradient at a candidate, or `None` if infeasible.
fn evaluate(
    omega: &DMatrix<f64>,
    p: &BlockKlProblem,
) -> Option<(f64, DMatrix<f64>)> {
    try_cholesky(omega)?;
    let s = omega + &p.cavity_precision;
    let ch = try_cholesky(&s)?;
    let loss = -chol_logdet(&ch) + frob_dot(&s, &p.tilted_cov);
    let mut grad = &p.tilted_cov - ch.inverse();
    match p.structure {
        BlockStructure::FullBlock => linalg::symmetrize(&mut grad),
        BlockStructure::Diagonal => {
            let d = grad.diagonal();
            grad = DMatrix::from_diagonal(&d);
        }
    }
    loss.is_finite().then_some((loss, grad))
}

/// `Cov_P⁻¹ − Ω_cav` when it is positive definite; the loss is convex in `Ω + Ω_cav`,
/// so this stationary point is then the constrained minimizer.
fn interior_optimum(p: &BlockKlProblem) -> Option<DMatrix<f64>> {
    let ch = try_cholesky(&p.tilted_cov)?;
    let mut omega = ch.inverse() - &p.cavity_precision;
    linalg::symmetrize(&mut omega);
    evaluate(&omega, p).map(|_| omega)
}

/// Closed form for interior full-block optima, otherwise gradient descent with
/// Barzilai–Borwein steps and halving backtracking.
pub fn update_block_precision(p: &BlockKlProblem, max_iters: usize, tol: f64) -> Result<BlockKlOutcome> {
    let r = p.tilted_cov.nrows();
    for m in [&p.tilted_cov, &p.cavity_precision, &p.initial_precision] {
        if m.nrows() != r || m.ncols() != r {
            return Err(Error::DimensionMismatch { expected: r, got: m.nrows() });
        }
    }
    if p.structure == BlockStructure::FullBlock {
        if let Some(omega) = interior_optimum(p) {
            let loss = evaluate(&omega, p).map(|(l, _)| l).unwrap_or(f64::NAN);
            return Ok(BlockKlOutcome {
                precision: omega,
                iterations: 0,
                converged: true,
                losses: vec![loss],
            });
        }
    }
    descend_block_precision(p, max_iters, tol)
}

/// The gradient iteration alone, started from `p.initial_precision`.
pub fn descend_block_precision(p: &BlockKlProblem, max_iters: usize, tol: f64) -> Result<BlockKlOutcome> {
    let r = p.tilted_cov.nrows();
    for m in [&p.cavity_precision, &p.initial_precision] {
        if m.nrows() != r || m.ncols() != r {
            return Err(Error::DimensionMismatch { expected: r, got: m.nrows() });
        }
    }
    let mut omega = p.initial_precision.clone();
    linalg::symmetrize(&mut omega);
    if p.structure == BlockStructure::Diagonal {
        omega = DMatrix::from_diagonal(&omega.diagonal());
    }
    let (mut loss, mut grad) =
        evaluate(&omega, p).ok_or_else(|| Error::NotPositiveDefinite("initial block precision".into()))?;
    let mut losses = vec![loss];
    let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        let mut lambda = match &prev {
            None => 1.0,
            Some((po, pg)) => {
                let dx = &omega - po;
                let dg = &grad - pg;
                let den = frob_dot(&dg, &dg);
                let bb = frob_dot(&dx, &dg) / den;
                if den > 0.0 && bb.is_finite() && bb > 0.0 {
                    bb
                } else {
                    1.0
                }
            }
        };
        let mut accepted = None;
        for _ in 0..=50 {
            let mut cand = &omega - &grad * lambda;
            linalg::symmetrize(&mut cand);
            if let Some((l, g)) = evaluate(&cand, p) {
                if l < loss {
                    accepted = Some((cand, l, g));
                    break;
                }
            }
            lambda *= 0.5;
        }
        let Some((cand, new_loss, new_grad)) = accepted else {
            break;
        };
        iterations += 1;
        let change = (loss - new_loss).abs() / new_loss.abs().max(1e-300);
        prev = Some((std::mem::replace(&mut omega, cand), std::mem::replace(&mut grad, new_grad)));
        loss = new_loss;
        losses.push(loss);
        if change < tol {
            converged = true;
            break;
        }
    }
    Ok(BlockKlOutcome {
        precision: omega,
        iterations,
        converged,
        losses,
    })
}

/// Closed-form diagonal update `1/d − p_cav`, floored at `1e-8`.
pub fn diag_kl_update(d: f64, p_cav: f64) -> Result<f64> {
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::invalid(format!("tilted variance must be positive, got {d}")));
    }
    let p = 1.0 / d - p_cav;
    Ok(if p > 0.0 { p } else { PRECISION_FLOOR })
}

/// Newton iterations for a single precision shared by all sites.
pub fn iso_kl_update(d: &[f64], p_cav: &[f64], init: f64) -> Result<f64> {
    Error::check_len(d.len(), p_cav.len())?;
    if d.is_empty() {
        return Err(Error::invalid("isotropic update needs at least one site"));
    }
    if d.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("tilted variances must be positive"));
    }
    let sum_d: f64 = d.iter().sum();
    let mut p = if init > 0.0 && init.is_finite() { init } else { 1.0 };
    for _ in 0..100 {
        let (mut s1, mut s2) = (0.0, 0.0);
        for &q in p_cav {
            let inv = 1.0 / (p + q);
            s1 += inv;
            s2 += inv * inv;
        }
        let next = (p + (s1 - sum_d) / s2).max(PRECISION_FLOOR);
        let delta = (next - p).abs();
        p = next;
        if delta <= 1e-10 * p {
            break;
        }
    }
    Ok(p)
}

/// Site mean `Ω_i⁻¹((Ω_i + Ω_cav) E_P − Ω_cav m_cav)`.
pub fn factor_mean_update(
    joint_mean: &DVector<f64>,
    own_precision: &DMatrix<f64>,
    cavity_precision: &DMatrix<f64>,
    cavity_mean: &DVector<f64>,
) -> Result<DVector<f64>> {
    let rhs = (own_precision + cavity_precision) * joint_mean - cavity_precision * cavity_mean;
    let ch = linalg::factor_spd(own_precision)?;
    Ok(ch.solve(&rhs))
}
