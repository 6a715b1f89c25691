use patch_ep::oracle::brute_force_tilted;
use patch_ep::rectified::{rectified_poisson_tilted, zero_count_by_quadrature};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mean_err(got: f64, want: f64, var: f64) -> f64 {
    (got - want).abs() / want.abs().max(var.sqrt())
}

#[test]
fn extreme_cavities_match_dense_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..60 {
        let y = [0.0, 1.0, 500.0, 1000.0][rng.random_range(0..4)];
        let mu = [-50.0, -1.0, 0.0, 1e-3, 1.0, 2000.0][rng.random_range(0..6)];
        let c = [1e-4, 1e-2, 1.0, 1e4][rng.random_range(0..4)];
        let t = rectified_poisson_tilted(y, mu, c).unwrap();
        let b = brute_force_tilted(y, mu, c, 1_000_000).unwrap();
        assert!(t.ok);
        assert!(mean_err(t.mean, b.mean, b.var) < 1e-7, "y={y} mu={mu} c={c}");
        assert!((t.var / b.var - 1.0).abs() < 1e-7, "y={y} mu={mu} c={c}");
    }
}

#[test]
fn zero_count_paths_agree_on_a_sweep() {
    for mu in [-30.0, -2.0, -0.1, 0.0, 0.3, 4.0, 80.0] {
        for c in [1e-3, 0.1, 1.0, 25.0, 1e3] {
            let a = rectified_poisson_tilted(0.0, mu, c).unwrap();
            let q = zero_count_by_quadrature(mu, c).unwrap();
            assert!(mean_err(a.mean, q.mean, q.var) < 1e-8, "mu={mu} c={c}");
            assert!((a.var / q.var - 1.0).abs() < 1e-8, "mu={mu} c={c}");
            assert!((a.log_z - q.log_z).abs() < 1e-8 * a.log_z.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tilted_moments_are_proper(y in 0u32..1000, mu in -100.0f64..1500.0, lc in -4.0f64..4.0) {
        let c = 10f64.powf(lc);
        let t = rectified_poisson_tilted(y as f64, mu, c).unwrap();
        prop_assert!(t.var > 0.0 && t.var.is_finite());
        // the likelihood is log-concave in u, so tilting never widens the cavity
        prop_assert!(t.var <= c * (1.0 + 1e-9));
        if y > 0 {
            prop_assert!(t.mean > 0.0);
        }
    }
}
