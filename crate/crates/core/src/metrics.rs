//! PSNR and credible-interval coverage.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// `10 log10(max(x)² / MSE)`; `+∞` when the estimate is exact.
pub fn psnr(reference: &[f64], estimate: &[f64]) -> Result<f64> {
    Error::check_len(reference.len(), estimate.len())?;
    if reference.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    let peak = reference.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak <= 0.0 {
        return Err(Error::invalid("reference image has no positive peak"));
    }
    let mse = reference.iter().zip(estimate).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageReport {
    pub level: f64,
    /// 1 where the reference lies outside the interval.
    pub outside: Vec<u8>,
    pub fraction_inside: f64,
}

/// Standard-normal quantile at `(1 + level) / 2`.
pub fn interval_half_width(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("level must lie in (0, 1), got {level}")));
    }
    Ok(Normal::standard().inverse_cdf(0.5 * (1.0 + level)))
}

pub fn coverage(reference: &[f64], mean: &[f64], variances: &[f64], level: f64) -> Result<CoverageReport> {
    Error::check_len(reference.len(), mean.len())?;
    Error::check_len(reference.len(), variances.len())?;
    if reference.is_empty() {
        return Err(Error::invalid("empty image"));
    }
    if variances.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("variances must be positive"));
    }
    let z = interval_half_width(level)?;
    let outside: Vec<u8> = reference
        .iter()
        .zip(mean)
        .zip(variances)
        .map(|((x, m), v)| u8::from((x - m).abs() > z * v.sqrt()))
        .collect();
    let miss = outside.iter().map(|&o| o as usize).sum::<usize>();
    Ok(CoverageReport {
        level,
        fraction_inside: 1.0 - miss as f64 / outside.len() as f64,
        outside,
    })
}

pub fn coverage_curve(reference: &[f64], mean: &[f64], variances: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
    if levels.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("levels must be sorted ascending"));
    }
    levels
        .iter()
        .map(|&l| coverage(reference, mean, variances, l).map(|c| c.fraction_inside))
        .collect()
}
