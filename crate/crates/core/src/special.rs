//! Normal-distribution helpers that stay accurate far in the tails.

use libm::erfc;

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const SQRT_2: f64 = std::f64::consts::SQRT_2;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// Continued-fraction denominators `K_n = a + n / K_{n+1}` evaluated backwards for `n = 1..=3`.
///
/// `1 / K_1` is the Mills ratio `(1 − Φ(a)) / φ(a)`.
fn mills_fraction(a: f64) -> [f64; 4] {
    let mut k = a;
    let mut out = [0.0; 4];
    for n in (1..=400).rev() {
        k = a + n as f64 / k;
        if n <= 4 {
            out[n - 1] = k;
        }
    }
    out
}

/// `exp(x²) · erfc(x)`.
pub fn erfcx(x: f64) -> f64 {
    if x >= 5.0 {
        // Mills ratio at a = √2·x: (1 − Φ(a))/φ(a) = √(π/2)·erfcx(x)
        let k = mills_fraction(SQRT_2 * x);
        SQRT_2 * FRAC_1_SQRT_PI / k[0]
    } else if x > -26.0 {
        (x * x).exp() * erfc(x)
    } else {
        f64::INFINITY
    }
}

/// `log Φ(z)`.
pub fn log_ndtr(z: f64) -> f64 {
    if z < 0.0 {
        (0.5 * erfcx(-z / SQRT_2)).ln() - 0.5 * z * z
    } else {
        (-0.5 * erfc(z / SQRT_2)).ln_1p()
    }
}

pub fn log_normal_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

/// Standard normal truncated to `(a, ∞)`: `(log mass, mean, variance)`.
pub fn truncated_standard_lower(a: f64) -> (f64, f64, f64) {
    let log_mass = log_ndtr(-a);
    if a >= 5.0 {
        let k = mills_fraction(a);
        // δ = λ − a = 1/K₂ and 1 − λδ = (a + 4/K₃ − 3/K₄) / (K₂² K₃)
        let delta = 1.0 / k[1];
        let var = (a + 4.0 / k[2] - 3.0 / k[3]) / (k[1] * k[1] * k[2]);
        (log_mass, a + delta, var)
    } else {
        let lambda = (log_normal_pdf(a) - log_mass).exp();
        let var = 1.0 - lambda * (lambda - a);
        (log_mass, lambda, var.max(0.0))
    }
}

/// `N(m, s²)` truncated to `(a, ∞)`.
pub fn truncated_lower(m: f64, s: f64, a: f64) -> (f64, f64, f64) {
    let (lm, mean, var) = truncated_standard_lower((a - m) / s);
    (lm, m + s * mean, s * s * var)
}

/// `N(m, s²)` truncated to `(−∞, b]`.
pub fn truncated_upper(m: f64, s: f64, b: f64) -> (f64, f64, f64) {
    let (lm, mean, var) = truncated_lower(-m, s, -b);
    (lm, -mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erfcx_branches_agree_at_switch() {
        let a = 0.110_704_637_733_068_61;
        assert!((erfcx(5.0) - a).abs() / a < 1e-12);
        // asymptotic 1/(x√π)
        assert!((erfcx(1e4) * 1e4 / FRAC_1_SQRT_PI - 1.0).abs() < 1e-8);
    }

    #[test]
    fn log_ndtr_tails() {
        assert!((log_ndtr(0.0) - 0.5f64.ln()).abs() < 1e-15);
        // log Φ(−40) ≈ −804.6084420137538
        assert!((log_ndtr(-40.0) + 804.608_442_013_753_8).abs() < 1e-9);
        assert!(log_ndtr(10.0) < 0.0 && log_ndtr(10.0) > -1e-20);
    }

    #[test]
    fn truncated_moments_continuous_across_branch() {
        let (_, m1, v1) = truncated_standard_lower(5.0 - 1e-12);
        let (_, m2, v2) = truncated_standard_lower(5.0);
        assert!((m1 - m2).abs() < 1e-10);
        assert!((v1 - v2).abs() / v2 < 1e-8);
    }

    #[test]
    fn untruncated_limit() {
        let (lm, m, v) = truncated_standard_lower(-40.0);
        assert!(lm.abs() < 1e-300 + 1e-20);
        assert!(m.abs() < 1e-300 + 1e-20);
        assert!((v - 1.0).abs() < 1e-15);
    }
}
