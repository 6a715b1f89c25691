use nalgebra::{DMatrix, DVector};
use patch_ep::ep::BlockMats;
use patch_ep::epem::{epem_e_cost, epem_m_step, EStats, MStepOptions};
use patch_ep::gmm::{adapt, gaussian_log_density, PatchGmm, Theta};
use patch_ep::partition::Partition;
use patch_ep::synth::{sample_from_prior, train_synthetic_gmm};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn base() -> PatchGmm {
    train_synthetic_gmm(3, 3, 2, 20, 7).unwrap()
}

/// Direct evaluation: log-determinants, traces and Mahalanobis terms per block and component.
fn dense_cost(theta: &Theta, base: &PatchGmm, part: &Partition, mean: &[f64], blocks: &[DMatrix<f64>], w: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (j, blk) in part.blocks().iter().enumerate() {
        let g = base.marginalize(&blk.local).unwrap();
        let r = blk.len();
        let m = DVector::from_iterator(r, blk.indices.iter().map(|&i| mean[i]));
        let norm: f64 = w[j].iter().sum();
        for k in 0..g.k() {
            let ct = g.covs()[k].clone() * theta.alpha.powi(2) + DMatrix::from_element(r, r, theta.s2);
            let mu = g.means()[k].map(|v| theta.m0 + theta.alpha * v);
            let inv = ct.clone().try_inverse().unwrap();
            let d = &m - &mu;
            let logdet = ct.determinant().ln();
            let val = -0.5 * (logdet + (&inv * &blocks[j]).trace() + (d.transpose() * &inv * &d)[0])
                - 0.5 * r as f64 * (2.0 * std::f64::consts::PI).ln();
            total += w[j][k] / norm * val;
        }
    }
    total
}

fn random_spd(r: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(r, r, |_, _| rng.random::<f64>() - 0.5);
    &a * a.transpose() * 0.01 + DMatrix::identity(r, r) * 1e-3
}

#[test]
fn cost_matches_direct_evaluation() {
    let g = base();
    let part = Partition::new(7, 5, 3, (1, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mean: Vec<f64> = (0..35).map(|_| rng.random::<f64>()).collect();
    let blocks: Vec<_> = part.blocks().iter().map(|b| random_spd(b.len(), &mut rng)).collect();
    let weights: Vec<Vec<f64>> = part.blocks().iter().map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
    let cov = BlockMats::Full(blocks.clone());
    for theta in [Theta::new(0.4, 0.02, 0.8).unwrap(), Theta::new(-0.1, 1e-6, 2.5).unwrap()] {
        let got = epem_e_cost(&theta, &g, &part, &mean, &cov, &weights).unwrap();
        let want = dense_cost(&theta, &g, &part, &mean, &blocks, &weights);
        assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn offset_is_block_mean_for_isotropic_zero_mean_prior() {
    let g = PatchGmm::new(vec![1.0], vec![DVector::zeros(4)], vec![DMatrix::identity(4, 4)]).unwrap();
    let part = Partition::new(4, 4, 2, (0, 0)).unwrap();
    let mean: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let cov = BlockMats::Diag(vec![0.1; 16]);
    let stats = EStats::new(&g, &part, &mean, &cov, &vec![vec![1.0]; 4]).unwrap();
    let want = mean.iter().sum::<f64>() / 16.0;
    assert!((stats.optimal_m0(0.0, 1.0) - want).abs() < 1e-14);
    assert!((stats.optimal_m0(0.3, 2.0) - want).abs() < 1e-14);
}

/// Complete-data statistics: `m*` is a prior draw, `Σ*` negligible, `ω̂` the true responsibilities.
fn complete_data(theta: Theta, size: usize, seed: u64) -> (PatchGmm, EStats) {
    let g = base();
    let adapted = adapt(&g, theta).unwrap();
    let part = Partition::new(size, size, 3, (0, 0)).unwrap();
    let x = sample_from_prior(&adapted, &part, seed).unwrap();
    let weights: Vec<Vec<f64>> = part
        .blocks()
        .iter()
        .map(|b| {
            let xb = DVector::from_iterator(b.len(), b.indices.iter().map(|&i| x[i]));
            let logp: Vec<f64> = (0..adapted.k())
                .map(|k| adapted.weights()[k].ln() + gaussian_log_density(&xb, &adapted.means()[k], &adapted.covs()[k]).unwrap())
                .collect();
            let top = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            logp.iter().map(|l| (l - top).exp()).collect()
        })
        .collect();
    let cov = BlockMats::Diag(vec![1e-12; x.len()]);
    let stats = EStats::new(&g, &part, &x, &cov, &weights).unwrap();
    (g, stats)
}

#[test]
fn generating_values_maximize_cost_on_a_grid() {
    let truth = Theta::new(0.4, 0.03, 0.7).unwrap();
    let (_, stats) = complete_data(truth, 60, 1);
    let best = stats.cost(&truth).unwrap();
    for dm in [-0.1, 0.0, 0.1] {
        for fs in [0.5, 1.0, 2.0] {
            for fa in [0.7, 1.0, 1.4] {
                let t = Theta::new(truth.m0 + dm, truth.s2 * fs, truth.alpha * fa).unwrap();
                if t != truth {
                    assert!(stats.cost(&t).unwrap() < best, "{t:?}");
                }
            }
        }
    }
}

#[test]
fn m_step_recovers_generating_values() {
    let truth = Theta::new(0.4, 0.03, 0.7).unwrap();
    let (_, stats) = complete_data(truth, 60, 2);
    let out = epem_m_step(&stats, Theta::new(0.0, 1.0, 1.0).unwrap(), &MStepOptions::default()).unwrap();
    assert!(out.converged);
    assert!((out.theta.m0 / truth.m0 - 1.0).abs() < 0.05, "{:?}", out.theta);
    assert!((out.theta.s2 / truth.s2 - 1.0).abs() < 0.25, "{:?}", out.theta);
    assert!((out.theta.alpha / truth.alpha - 1.0).abs() < 0.05, "{:?}", out.theta);
}

#[test]
fn fixed_scale_is_left_alone() {
    let (_, stats) = complete_data(Theta::new(0.4, 0.03, 0.7).unwrap(), 30, 3);
    let opts = MStepOptions {
        fix_alpha: true,
        ..MStepOptions::default()
    };
    let out = epem_m_step(&stats, Theta::new(0.0, 0.1, 1.0).unwrap(), &opts).unwrap();
    assert_eq!(out.theta.alpha, 1.0);
    assert!(out.theta.m0 != 0.0 && out.theta.s2 != 0.1);
}

#[test]
fn scaling_weights_changes_nothing() {
    let g = base();
    let part = Partition::new(6, 6, 3, (1, 1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mean: Vec<f64> = (0..36).map(|_| rng.random::<f64>()).collect();
    let cov = BlockMats::Diag(vec![0.01; 36]);
    let w: Vec<Vec<f64>> = part.blocks().iter().map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
    let w2: Vec<Vec<f64>> = w.iter().map(|r| r.iter().map(|v| 2.0 * v).collect()).collect();
    let a = EStats::new(&g, &part, &mean, &cov, &w).unwrap();
    let b = EStats::new(&g, &part, &mean, &cov, &w2).unwrap();
    let th = Theta::new(0.3, 0.01, 1.2).unwrap();
    assert_eq!(a.cost(&th).unwrap(), b.cost(&th).unwrap());
    let start = Theta::default();
    let (ta, tb) = (
        epem_m_step(&a, start, &MStepOptions::default()).unwrap().theta,
        epem_m_step(&b, start, &MStepOptions::default()).unwrap().theta,
    );
    assert_eq!(ta, tb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn m_step_never_lowers_cost(seed in 0u64..1000, m0 in -1.0f64..1.0, s2 in 1e-6f64..1.0, alpha in 0.05f64..5.0) {
        let g = base();
        let part = Partition::new(6, 6, 3, (seed as usize % 3, 0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean: Vec<f64> = (0..36).map(|_| rng.random::<f64>()).collect();
        let cov = BlockMats::Diag((0..36).map(|_| 1e-3 + 0.05 * rng.random::<f64>()).collect());
        let w: Vec<Vec<f64>> = part.blocks().iter().map(|_| (0..3).map(|_| rng.random::<f64>() + 1e-3).collect()).collect();
        let stats = EStats::new(&g, &part, &mean, &cov, &w).unwrap();
        let out = epem_m_step(&stats, Theta::new(m0, s2, alpha).unwrap(), &MStepOptions::default()).unwrap();
        prop_assert!(out.costs.windows(2).all(|c| c[1] >= c[0]));
        prop_assert!(out.costs.last().unwrap() >= &stats.cost(&Theta::new(m0, s2, alpha).unwrap()).unwrap());
    }
}
