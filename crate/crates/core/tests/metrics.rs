use patch_ep::metrics::{coverage, coverage_curve, psnr};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn psnr_formula_values() {
    let x = vec![1.0, 0.0, 0.5, 0.5];
    // squared errors 0.04 on one pixel of four gives MSE 0.01
    let y = vec![0.8, 0.0, 0.5, 0.5];
    assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-12);
    assert!(psnr(&x, &y[..3]).is_err());
}

#[test]
fn calibrated_gaussians_cover_at_their_level() {
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let std = Normal::new(0.0, 1.0).unwrap();
    let mean: Vec<f64> = (0..n).map(|i| (i % 17) as f64 * 0.1).collect();
    let var: Vec<f64> = (0..n).map(|i| 0.01 + (i % 5) as f64 * 0.2).collect();
    let truth: Vec<f64> = (0..n).map(|i| mean[i] + var[i].sqrt() * std.sample(&mut rng)).collect();
    let levels = [0.5, 0.7, 0.9, 0.95, 0.99];
    let curve = coverage_curve(&truth, &mean, &var, &levels).unwrap();
    for (l, f) in levels.iter().zip(&curve) {
        let se = (l * (1.0 - l) / n as f64).sqrt();
        assert!((f - l).abs() <= 3.0 * se, "level {l}: {f}");
    }
    let single = coverage(&truth, &mean, &var, 0.9).unwrap();
    assert_eq!(coverage_curve(&truth, &mean, &var, &[0.9]).unwrap(), vec![single.fraction_inside]);
}

#[test]
fn tiny_levels_cover_almost_nothing() {
    let c = coverage(&[0.1, -0.2, 0.3], &[0.0; 3], &[1.0; 3], 1e-9).unwrap();
    assert_eq!(c.fraction_inside, 0.0);
    assert_eq!(c.outside, vec![1, 1, 1]);
}

proptest! {
    #[test]
    fn psnr_is_scale_invariant(
        x in prop::collection::vec(0.01f64..1.0, 4..40),
        noise in prop::collection::vec(-0.2f64..0.2, 40),
        c in 0.01f64..100.0,
    ) {
        let y: Vec<f64> = x.iter().zip(&noise).map(|(a, e)| a + e).collect();
        let p = psnr(&x, &y).unwrap();
        let xs: Vec<f64> = x.iter().map(|v| v * c).collect();
        let ys: Vec<f64> = y.iter().map(|v| v * c).collect();
        let q = psnr(&xs, &ys).unwrap();
        if p.is_finite() {
            prop_assert!((p - q).abs() < 1e-9 * p.abs().max(1.0));
        } else {
            prop_assert_eq!(q, f64::INFINITY);
        }
    }

    #[test]
    fn coverage_is_monotone_and_consistent(
        truth in prop::collection::vec(-3.0f64..3.0, 1..60),
        scale in 0.01f64..4.0,
        mut levels in prop::collection::vec(0.01f64..0.999, 1..8),
    ) {
        levels.sort_by(f64::total_cmp);
        let n = truth.len();
        let mean = vec![0.0; n];
        let var = vec![scale; n];
        let curve = coverage_curve(&truth, &mean, &var, &levels).unwrap();
        prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        for &l in &levels {
            let c = coverage(&truth, &mean, &var, l).unwrap();
            let outside = c.outside.iter().map(|&b| b as f64).sum::<f64>() / n as f64;
            prop_assert!((c.fraction_inside - (1.0 - outside)).abs() < 1e-15);
        }
    }
}
