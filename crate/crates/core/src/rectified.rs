//! Moments of the rectified Poisson likelihood times a Gaussian cavity.
//!
//! The likelihood of a count `y` given a real rate `u` is `Poisson(y; max(u, 0))`,
//! so `y = 0` has mass one for `u ≤ 0` and `y > 0` has none there.

use libm::lgamma as ln_gamma;

use crate::error::{Error, Result};
use crate::gmm::log_sum_exp;
use crate::quadrature::integrate_log_concave;
use crate::special::{truncated_lower, truncated_upper};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TiltedMoments {
    /// `log ∫ P(y | u) N(u; μ, c) du`.
    pub log_z: f64,
    pub mean: f64,
    pub var: f64,
    /// `false` when the evidence underflowed and the cavity moments were returned.
    pub ok: bool,
}

fn combine(parts: &[(f64, f64, f64)]) -> (f64, f64, f64) {
    let logs: Vec<f64> = parts.iter().map(|p| p.0).collect();
    let lz = log_sum_exp(&logs);
    let mut mean = 0.0;
    let mut second = 0.0;
    for &(l, m, _) in parts {
        let w = (l - lz).exp();
        mean += w * m;
    }
    for &(l, m, v) in parts {
        let w = (l - lz).exp();
        second += w * (v + (m - mean) * (m - mean));
    }
    (lz, mean, second)
}

/// Closed form for `y = 0`: a mixture of two truncated Gaussians.
fn zero_count(mu: f64, c: f64) -> TiltedMoments {
    let s = c.sqrt();
    // u > 0: e^{−u} N(u; μ, c) = e^{−μ + c/2} N(u; μ − c, c)
    let (la, ma, va) = truncated_lower(mu - c, s, 0.0);
    let (lb, mb, vb) = truncated_upper(mu, s, 0.0);
    let parts = [(la - mu + 0.5 * c, ma, va), (lb, mb, vb)];
    let (lz, mean, var) = combine(&parts);
    TiltedMoments {
        log_z: lz,
        mean,
        var,
        ok: true,
    }
}

fn fallback(mu: f64, c: f64) -> TiltedMoments {
    log::warn!("rectified Poisson evidence underflowed (mu={mu}, c={c}); keeping cavity moments");
    TiltedMoments {
        log_z: f64::NEG_INFINITY,
        mean: mu,
        var: c,
        ok: false,
    }
}

fn positive_count(y: f64, mu: f64, c: f64) -> TiltedMoments {
    // stationary point of y·ln u − u − (u − μ)²/(2c): u² + (c − μ)u − yc = 0
    let b = c - mu;
    let disc = (b * b + 4.0 * y * c).sqrt();
    let mode = if b > 0.0 { 2.0 * y * c / (b + disc) } else { 0.5 * (disc - b) };
    let curvature = y / (mode * mode) + 1.0 / c;
    let g = |u: f64| {
        if u <= 0.0 {
            f64::NEG_INFINITY
        } else {
            y * u.ln() - u - (u - mu) * (u - mu) / (2.0 * c)
        }
    };
    match integrate_log_concave(g, mode, 1.0 / curvature.sqrt(), 0.0, f64::INFINITY) {
        Some(q) => TiltedMoments {
            log_z: q.log_z - ln_gamma(y + 1.0) - 0.5 * (LN_2PI + c.ln()),
            mean: q.mean,
            var: q.var,
            ok: true,
        },
        None => fallback(mu, c),
    }
}

/// Evidence, mean and variance of `Poisson(y; max(u, 0)) · N(u; μ, c)`.
pub fn rectified_poisson_tilted(y: f64, mu: f64, c: f64) -> Result<TiltedMoments> {
    if !(y >= 0.0) || y.fract() != 0.0 || !y.is_finite() {
        return Err(Error::invalid(format!("count must be a non-negative integer, got {y}")));
    }
    if !(c > 0.0 && c.is_finite()) || !mu.is_finite() {
        return Err(Error::invalid(format!("cavity must have finite mean and positive variance (mu={mu}, c={c})")));
    }
    let t = if y == 0.0 { zero_count(mu, c) } else { positive_count(y, mu, c) };
    if t.ok && !(t.var > 0.0 && t.mean.is_finite()) {
        return Ok(fallback(mu, c));
    }
    Ok(t)
}

/// Quadrature-only evaluation of the `y = 0` case, one integral per side of zero.
pub fn zero_count_by_quadrature(mu: f64, c: f64) -> Result<TiltedMoments> {
    if !(c > 0.0) {
        return Err(Error::invalid("cavity variance must be positive"));
    }
    let s = c.sqrt();
    let lower = |u: f64| -(u - mu) * (u - mu) / (2.0 * c);
    let upper = |u: f64| -u - (u - mu) * (u - mu) / (2.0 * c);
    let ql = integrate_log_concave(lower, mu.min(0.0), s, f64::NEG_INFINITY, 0.0);
    let qu = integrate_log_concave(upper, (mu - c).max(0.0), s, 0.0, f64::INFINITY);
    let norm = -0.5 * (LN_2PI + c.ln());
    let parts: Vec<(f64, f64, f64)> = [ql, qu].into_iter().flatten().map(|q| (q.log_z + norm, q.mean, q.var)).collect();
    if parts.is_empty() {
        return Ok(fallback(mu, c));
    }
    let (lz, mean, var) = combine(&parts);
    Ok(TiltedMoments {
        log_z: lz,
        mean,
        var,
        ok: true,
    })
}
