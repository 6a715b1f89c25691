//! Adaptive-range composite Gauss–Legendre integration of log-concave densities.

use std::sync::OnceLock;

const ORDER: usize = 16;
const PANELS: usize = 64;
/// The integration range is grown until the log-integrand has dropped by this much.
const LOG_DROP: f64 = 46.0;

fn gauss_legendre() -> &'static [(f64, f64); ORDER] {
    static NODES: OnceLock<[(f64, f64); ORDER]> = OnceLock::new();
    NODES.get_or_init(|| {
        let n = ORDER;
        let mut out = [(0.0, 0.0); ORDER];
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            out[i] = (-x, w);
            out[n - 1 - i] = (x, w);
        }
        out
    })
}

/// `∫ exp(g(u) − shift) du` together with the first two central moments.
#[derive(Clone, Copy, Debug)]
pub struct LogQuadrature {
    /// `log ∫ exp(g)`.
    pub log_z: f64,
    pub mean: f64,
    pub var: f64,
}

fn extend(g: &impl Fn(f64) -> f64, mode: f64, g_mode: f64, step: f64, bound: f64, dir: f64) -> f64 {
    let mut t = step;
    for _ in 0..200 {
        let u = mode + dir * t;
        if (dir > 0.0 && u >= bound) || (dir < 0.0 && u <= bound) {
            return bound;
        }
        if g_mode - g(u) >= LOG_DROP {
            return u;
        }
        t *= 2.0;
    }
    mode + dir * t
}

/// Integrates `exp(g)` on `[lo, hi]` (bounds may be infinite) for a unimodal `g` with
/// maximizer `mode` and curvature scale `scale`.
pub fn integrate_log_concave(g: impl Fn(f64) -> f64, mode: f64, scale: f64, lo: f64, hi: f64) -> Option<LogQuadrature> {
    let g_mode = g(mode);
    if !g_mode.is_finite() || !(scale > 0.0) || !(hi > lo) {
        return None;
    }
    let a = extend(&g, mode, g_mode, scale, lo, -1.0);
    let b = extend(&g, mode, g_mode, scale, hi, 1.0);
    if !(b > a) {
        return None;
    }
    let nodes = gauss_legendre();
    let h = (b - a) / PANELS as f64;
    let mut pts = Vec::with_capacity(PANELS * ORDER);
    for p in 0..PANELS {
        let c = a + h * (p as f64 + 0.5);
        for &(x, w) in nodes {
            let u = c + 0.5 * h * x;
            let f = (g(u) - g_mode).exp() * w * 0.5 * h;
            pts.push((u, f));
        }
    }
    let s: f64 = pts.iter().map(|p| p.1).sum();
    if !(s > 1e-300) || !s.is_finite() {
        return None;
    }
    let mean = pts.iter().map(|&(u, f)| u * f).sum::<f64>() / s;
    let var = pts.iter().map(|&(u, f)| (u - mean) * (u - mean) * f).sum::<f64>() / s;
    Some(LogQuadrature {
        log_z: g_mode + s.ln(),
        mean,
        var,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_integrate_polynomials_exactly() {
        let nodes = gauss_legendre();
        let sum_w: f64 = nodes.iter().map(|n| n.1).sum();
        assert!((sum_w - 2.0).abs() < 1e-14);
        let x30: f64 = nodes.iter().map(|&(x, w)| w * x.powi(30)).sum();
        assert!((x30 - 2.0 / 31.0).abs() < 1e-14);
    }

    #[test]
    fn gaussian_integrand_recovers_moments() {
        let (m, c) = (3.7f64, 0.42f64);
        let q = integrate_log_concave(|u| -(u - m) * (u - m) / (2.0 * c), m, c.sqrt(), f64::NEG_INFINITY, f64::INFINITY).unwrap();
        assert!((q.mean - m).abs() < 1e-10);
        assert!((q.var - c).abs() / c < 1e-10);
        assert!((q.log_z - (2.0 * std::f64::consts::PI * c).sqrt().ln()).abs() < 1e-10);
    }
}
