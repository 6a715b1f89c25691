//! Dense-grid integration of the rectified Poisson tilted distribution.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BruteMoments {
    pub mean: f64,
    pub var: f64,
}

/// Unnormalized log-integrand `log P(y | max(u, 0)) + log N(u; μ, c)` without constants.
fn log_integrand(y: f64, mu: f64, c: f64, u: f64) -> f64 {
    let prior = -(u - mu) * (u - mu) / (2.0 * c);
    if u <= 0.0 {
        if y == 0.0 {
            prior
        } else {
            f64::NEG_INFINITY
        }
    } else {
        y * u.ln() - u + prior
    }
}

/// Composite Simpson sums `(Z, Σu, Σ(u−s)²)` on `[a, b]` with `n` (even) panels, scaled by `exp(−shift)`.
fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, n: usize, shift: f64, centre: f64) -> (f64, f64, f64) {
    let h = (b - a) / n as f64;
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for i in 0..=n {
        let u = a + h * i as f64;
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let p = w * (f(u) - shift).exp();
        z += p;
        m1 += p * (u - centre);
        m2 += p * (u - centre) * (u - centre);
    }
    (z * h / 3.0, m1 * h / 3.0, m2 * h / 3.0)
}

/// Mean and variance from `points` Simpson nodes, after two coarse passes locate the mass.
pub fn brute_force_tilted(y: f64, mu: f64, c: f64, points: usize) -> Result<BruteMoments> {
    if !(c > 0.0) || !(y >= 0.0) || points < 100 {
        return Err(Error::invalid("bad brute-force integration inputs"));
    }
    let f = |u: f64| log_integrand(y, mu, c, u);
    let spread = c.sqrt() + (y + 1.0).sqrt();
    let mut lo = if y > 0.0 { 0.0 } else { mu.min(0.0) - 60.0 * spread - 10.0 };
    let mut hi = mu.max(y).max(0.0) + 60.0 * spread + 10.0;
    for _ in 0..3 {
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        let shift = (0..=n).map(|i| f(lo + h * i as f64)).fold(f64::NEG_INFINITY, f64::max);
        let (z, m1, m2) = simpson(&f, lo, hi, n, shift, 0.0);
        let mean = m1 / z;
        let sd = (m2 / z - mean * mean).max(0.0).sqrt().max(4.0 * h);
        let (nlo, nhi) = (mean - 40.0 * sd, mean + 40.0 * sd);
        lo = if y > 0.0 { nlo.max(0.0) } else { nlo };
        hi = nhi;
    }
    // split at the kink so every panel integrates a smooth function
    let pieces: Vec<(f64, f64)> = if lo < 0.0 && hi > 0.0 { vec![(lo, 0.0), (0.0, hi)] } else { vec![(lo, hi)] };
    let centre = 0.5 * (lo + hi);
    let probe = 10_000;
    let shift = (0..=probe)
        .map(|i| f(lo + (hi - lo) * i as f64 / probe as f64))
        .fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for &(a, b) in &pieces {
        let n = ((points as f64 * (b - a) / (hi - lo)) as usize / 2 * 2).max(2);
        let (zi, m1i, m2i) = simpson(&f, a, b, n, shift, centre);
        z += zi;
        m1 += m1i;
        m2 += m2i;
    }
    let d = m1 / z;
    Ok(BruteMoments {
        mean: centre + d,
        var: m2 / z - d * d,
    })
}
