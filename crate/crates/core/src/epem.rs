//! EM estimation of the offset `m0`, patch-mean variance `s²` and scale `α` from EP moments.
//!
//! The expected complete-data log-prior only depends on a handful of per-component
//! statistics of the EP posterior, so the M-step never revisits individual blocks.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ep::BlockMats;
use crate::error::{Error, Result};
use crate::gmm::{PatchGmm, Theta};
use crate::linalg::{chol_logdet, factor_spd};
use crate::partition::Partition;

pub const S2_BOUNDS: (f64, f64) = (1e-8, 10.0);
pub const ALPHA_BOUNDS: (f64, f64) = (1e-3, 1e3);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MStepOptions {
    pub max_rounds: usize,
    pub tol: f64,
    pub fix_alpha: bool,
    /// Width of the final golden-section bracket in log units.
    pub search_tol: f64,
}

impl Default for MStepOptions {
    fn default() -> Self {
        Self {
            max_rounds: 20,
            tol: 1e-4,
            fix_alpha: false,
            search_tol: 1e-9,
        }
    }
}

/// Per-component moments of the base mixture restricted to one block shape,
/// together with the EP statistics of the blocks of that shape.
#[derive(Clone, Debug)]
struct ComponentStats {
    dim: f64,
    logdet_c: f64,
    /// `1ᵀC⁻¹1`
    a: f64,
    /// `1ᵀC⁻¹μ`
    u_mu: f64,
    /// `μᵀC⁻¹μ`
    mu_q: f64,
    /// `Σ_j ω̂_jk`
    w: f64,
    /// `Σ_j ω̂_jk tr(C⁻¹(Σ_j + m_j m_jᵀ))`
    tr_s: f64,
    /// `Σ_j ω̂_jk 1ᵀC⁻¹(Σ_j + m_j m_jᵀ)C⁻¹1`
    u_s_u: f64,
    /// `Σ_j ω̂_jk 1ᵀC⁻¹m_j`
    u_m: f64,
    /// `Σ_j ω̂_jk μᵀC⁻¹m_j`
    mu_m: f64,
}

/// Sufficient statistics of `Q(x)` and `Q(z)` for the EM cost.
#[derive(Clone, Debug)]
pub struct EStats {
    comps: Vec<ComponentStats>,
}

struct Shape {
    c_inv: Vec<DMatrix<f64>>,
    u: Vec<DVector<f64>>,
    mu: Vec<DVector<f64>>,
    logdet: Vec<f64>,
    w: Vec<f64>,
    m1: Vec<DVector<f64>>,
    s: Vec<DMatrix<f64>>,
}

impl EStats {
    /// Accumulates statistics from EP block moments and tilted weights; weights are normalized per block.
    pub fn new(base: &PatchGmm, part: &Partition, mean: &[f64], cov: &BlockMats, weights: &[Vec<f64>]) -> Result<Self> {
        Error::check_len(part.pixel_count(), mean.len())?;
        Error::check_len(part.num_blocks(), weights.len())?;
        if base.dim() != part.patch_dim() {
            return Err(Error::DimensionMismatch {
                expected: part.patch_dim(),
                got: base.dim(),
            });
        }
        let k = base.k();
        let mut shapes: BTreeMap<Vec<usize>, Shape> = BTreeMap::new();
        for (j, blk) in part.blocks().iter().enumerate() {
            Error::check_len(k, weights[j].len())?;
            let total: f64 = weights[j].iter().sum();
            if !(total > 0.0 && total.is_finite()) || weights[j].iter().any(|w| *w < 0.0) {
                return Err(Error::invalid(format!("invalid component weights for block {j}")));
            }
            if !shapes.contains_key(&blk.local) {
                let g = if blk.len() == base.dim() { base.clone() } else { base.marginalize(&blk.local)? };
                let r = blk.len();
                let mut shape = Shape {
                    c_inv: Vec::with_capacity(k),
                    u: Vec::with_capacity(k),
                    mu: g.means().to_vec(),
                    logdet: Vec::with_capacity(k),
                    w: vec![0.0; k],
                    m1: vec![DVector::zeros(r); k],
                    s: vec![DMatrix::zeros(r, r); k],
                };
                for c in g.covs() {
                    let ch = factor_spd(c)?;
                    shape.logdet.push(chol_logdet(&ch));
                    shape.u.push(ch.solve(&DVector::from_element(r, 1.0)));
                    shape.c_inv.push(ch.inverse());
                }
                shapes.insert(blk.local.clone(), shape);
            }
            let shape = shapes.get_mut(&blk.local).expect("shape inserted above");
            let m = part.gather(mean, j)?;
            let second = cov.block(part, j) + &m * m.transpose();
            for (c, &w) in weights[j].iter().enumerate() {
                let w = w / total;
                if w == 0.0 {
                    continue;
                }
                shape.w[c] += w;
                shape.m1[c] += &m * w;
                shape.s[c] += &second * w;
            }
        }
        let mut comps = Vec::new();
        for shape in shapes.values() {
            for c in 0..k {
                let (ci, u, mu) = (&shape.c_inv[c], &shape.u[c], &shape.mu[c]);
                let ci_mu = ci * mu;
                comps.push(ComponentStats {
                    dim: u.len() as f64,
                    logdet_c: shape.logdet[c],
                    a: u.sum(),
                    u_mu: u.dot(mu),
                    mu_q: mu.dot(&ci_mu),
                    w: shape.w[c],
                    tr_s: ci.component_mul(&shape.s[c]).sum(),
                    u_s_u: u.dot(&(&shape.s[c] * u)),
                    u_m: u.dot(&shape.m1[c]),
                    mu_m: ci_mu.dot(&shape.m1[c]),
                });
            }
        }
        Ok(Self { comps })
    }

    /// Expected complete-data log-prior `Σ_jk ω̂_jk E_Q[log N(x_j; m0·1 + αμ_k, s²11ᵀ + α²C_k)]`.
    pub fn cost(&self, theta: &Theta) -> Result<f64> {
        theta.validate()?;
        let (m0, s2, alpha) = (theta.m0, theta.s2, theta.alpha);
        let a2 = alpha * alpha;
        let mut total = 0.0;
        for c in &self.comps {
            if c.w == 0.0 {
                continue;
            }
            let beta = s2 / (a2 + s2 * c.a);
            let logdet = c.dim * a2.ln() + c.logdet_c + (1.0 + s2 * c.a / a2).ln();
            let tr = c.tr_s - 2.0 * (m0 * c.u_m + alpha * c.mu_m)
                + c.w * (m0 * m0 * c.a + 2.0 * m0 * alpha * c.u_mu + a2 * c.mu_q);
            let lin = m0 * c.a + alpha * c.u_mu;
            let udu = c.u_s_u - 2.0 * c.u_m * lin + c.w * lin * lin;
            let quad = (tr - beta * udu) / a2;
            total -= 0.5 * (c.w * (logdet + c.dim * (2.0 * std::f64::consts::PI).ln()) + quad);
        }
        Ok(total)
    }

    /// Maximizer of [`EStats::cost`] in `m0` for fixed `(s², α)`.
    pub fn optimal_m0(&self, s2: f64, alpha: f64) -> f64 {
        let a2 = alpha * alpha;
        let (mut num, mut den) = (0.0, 0.0);
        for c in &self.comps {
            // C̃⁻¹1 = (1 − βa) C⁻¹1 / α²
            let f = (1.0 - s2 * c.a / (a2 + s2 * c.a)) / a2;
            num += f * (c.u_m - alpha * c.w * c.u_mu);
            den += f * c.w * c.a;
        }
        num / den
    }
}

/// Evaluates the EM cost directly from EP quantities.
pub fn epem_e_cost(
    theta: &Theta,
    base: &PatchGmm,
    part: &Partition,
    mean: &[f64],
    cov: &BlockMats,
    weights: &[Vec<f64>],
) -> Result<f64> {
    EStats::new(base, part, mean, cov, weights)?.cost(theta)
}

#[derive(Clone, Debug, Serialize)]
pub struct MStepOutcome {
    pub theta: Theta,
    pub rounds: usize,
    pub converged: bool,
    /// Cost at the start followed by the cost after every round.
    pub costs: Vec<f64>,
    pub clamped: bool,
}

fn golden_max(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    // the end points are never probed by the interior recursion
    [lo, x, hi].into_iter().fold((x, f(x)), |best, t| {
        let v = f(t);
        if v > best.1 {
            (t, v)
        } else {
            best
        }
    }).0
}

/// Maximizes `f` over `log t ∈ [log lo, log hi]`; reports whether the result sits on a bound.
fn search_log(f: impl Fn(f64) -> f64, (lo, hi): (f64, f64), tol: f64) -> (f64, bool) {
    let t = golden_max(|l| f(l.exp()), lo.ln(), hi.ln(), tol).exp();
    let at_bound = (t.ln() - lo.ln()).abs() < 10.0 * tol || (t.ln() - hi.ln()).abs() < 10.0 * tol;
    (t.clamp(lo, hi), at_bound)
}

fn rel_change(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Coordinate ascent: `m0` in closed form, then `s²` and `α` by golden-section search.
/// A coordinate move is kept only if it does not lower the cost.
pub fn epem_m_step(stats: &EStats, prev: Theta, opts: &MStepOptions) -> Result<MStepOutcome> {
    prev.validate()?;
    let eval = |m0: f64, s2: f64, alpha: f64| stats.cost(&Theta { m0, s2, alpha }).unwrap_or(f64::NEG_INFINITY);
    let mut theta = Theta {
        s2: prev.s2.clamp(S2_BOUNDS.0, S2_BOUNDS.1),
        alpha: if opts.fix_alpha { prev.alpha } else { prev.alpha.clamp(ALPHA_BOUNDS.0, ALPHA_BOUNDS.1) },
        ..prev
    };
    let mut cost = eval(theta.m0, theta.s2, theta.alpha);
    let mut costs = vec![stats.cost(&prev)?];
    let mut clamped = false;
    let mut converged = false;
    let mut rounds = 0;
    while rounds < opts.max_rounds {
        rounds += 1;
        let old = theta;

        let m0 = stats.optimal_m0(theta.s2, theta.alpha);
        let c = eval(m0, theta.s2, theta.alpha);
        if m0.is_finite() && c >= cost {
            theta.m0 = m0;
            cost = c;
        }

        let (s2, s2_bound) = search_log(|s| eval(theta.m0, s, theta.alpha), S2_BOUNDS, opts.search_tol);
        let c = eval(theta.m0, s2, theta.alpha);
        if c >= cost {
            theta.s2 = s2;
            cost = c;
        }

        let mut alpha_bound = false;
        if !opts.fix_alpha {
            let (alpha, b) = search_log(|a| eval(theta.m0, theta.s2, a), ALPHA_BOUNDS, opts.search_tol);
            alpha_bound = b;
            let c = eval(theta.m0, theta.s2, alpha);
            if c >= cost {
                theta.alpha = alpha;
                cost = c;
            }
        }
        clamped = s2_bound || alpha_bound;
        costs.push(cost);

        if rel_change(old.m0, theta.m0) < opts.tol
            && rel_change(old.s2, theta.s2) < opts.tol
            && rel_change(old.alpha, theta.alpha) < opts.tol
        {
            converged = true;
            break;
        }
    }
    if clamped {
        log::warn!("M-step optimum on the search boundary: s2={:.3e} alpha={:.3e}", theta.s2, theta.alpha);
    }
    Ok(MStepOutcome {
        theta,
        rounds,
        converged,
        costs,
        clamped,
    })
}

/// Relative change used to stop the outer EP/EM alternation.
pub fn theta_change(a: &Theta, b: &Theta) -> f64 {
    rel_change(a.m0, b.m0).max(rel_change(a.s2, b.s2)).max(rel_change(a.alpha, b.alpha))
}

/// Moment-based starting point from the observation.
///
/// `noise_var` is the per-pixel noise variance in the units of `y`; `observed`
/// flags pixels that carry data.
pub fn initial_theta(base: &PatchGmm, part: &Partition, y: &[f64], observed: &[bool], noise_var: f64) -> Result<Theta> {
    Error::check_len(part.pixel_count(), y.len())?;
    Error::check_len(y.len(), observed.len())?;
    let r = base.dim() as f64;
    let mut means = Vec::new();
    let mut within = Vec::new();
    for blk in part.blocks() {
        let vals: Vec<f64> = blk.indices.iter().filter(|&&i| observed[i]).map(|&i| y[i]).collect();
        if vals.len() < 2 {
            continue;
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        means.push(m);
        within.push(vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0));
    }
    if means.is_empty() {
        return Err(Error::invalid("too few observed pixels to initialize hyperparameters"));
    }
    let nb = means.len() as f64;
    let m0 = means.iter().sum::<f64>() / nb;
    let between = means.iter().map(|m| (m - m0) * (m - m0)).sum::<f64>() / nb.max(2.0);
    let s2 = (between - noise_var / r).clamp(S2_BOUNDS.0, S2_BOUNDS.1);

    // per-pixel within-patch variance of the base mixture
    let mut tau = 0.0;
    for ((w, mu), c) in base.weights().iter().zip(base.means()).zip(base.covs()) {
        let second = c + mu * mu.transpose();
        tau += w * (second.trace() - second.sum() / r) / (r - 1.0).max(1.0);
    }
    let v = within.iter().sum::<f64>() / within.len() as f64;
    let alpha2 = (v - noise_var).max(1e-2 * v.max(1e-12)) / tau.max(1e-300);
    let alpha = alpha2.sqrt().clamp(ALPHA_BOUNDS.0, ALPHA_BOUNDS.1);
    Theta::new(m0, s2, alpha)
}
