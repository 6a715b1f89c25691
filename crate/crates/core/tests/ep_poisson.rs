use std::sync::Arc;

use patch_ep::ep::gaussian::run_ep_gaussian;
use patch_ep::ep::poisson::{run_augmented, run_ep_poisson, AugmentedInit, GaussianObservation};
use patch_ep::ep::EpConfig;
use patch_ep::forward::{simulate, DegradationOperator, Kernel, NoiseModel};
use patch_ep::gmm::{adapt, prepare_for_partition, AdaptedGmm, PreparedGmm, Theta};
use patch_ep::metrics::psnr;
use patch_ep::oracle::{mcmc_poisson_reference, McmcLikelihood, McmcOptions};
use patch_ep::partition::Partition;
use patch_ep::synth::{synthetic_image, train_synthetic_gmm};

const PEAK: f64 = 30.0;

fn count_prior() -> AdaptedGmm {
    let base = train_synthetic_gmm(3, 4, 3, 24, 11).unwrap();
    adapt(&base, Theta::new(0.45 * PEAK, 0.04 * PEAK * PEAK, PEAK).unwrap()).unwrap()
}

fn counts(op: &DegradationOperator, size: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let x: Vec<f64> = synthetic_image(size, size, seed).unwrap().data().iter().map(|v| v * PEAK).collect();
    let y = simulate(op, &x, NoiseModel::Poisson, seed + 1).unwrap();
    (x, y)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1e-12)).fold(0.0, f64::max)
}

fn gaussian_reduction(op: &DegradationOperator) {
    let base = train_synthetic_gmm(3, 4, 3, 24, 11).unwrap();
    let gmm = adapt(&base, Theta::new(0.45, 0.04, 1.0).unwrap()).unwrap();
    let part = Partition::new(8, 8, 4, (1, 2)).unwrap();
    let x = synthetic_image(8, 8, 2).unwrap();
    let sigma2 = 0.01;
    let y = simulate(op, x.data(), NoiseModel::Gaussian { variance: sigma2 }, 3).unwrap();
    let cfg = EpConfig {
        stop_threshold: 1e-24,
        max_iters: 30,
        ..EpConfig::default()
    };
    let g = run_ep_gaussian(&y, op, sigma2, &gmm, &part, &cfg).unwrap();
    let priors: Vec<Arc<PreparedGmm>> = prepare_for_partition(&gmm, &part).unwrap();
    let n = y.len();
    let init = AugmentedInit {
        x_mean: y.clone(),
        x_var: vec![sigma2; n],
        u0_mean: y.clone(),
        c0: vec![sigma2; n],
        u1_mean: y.clone(),
        c1: sigma2,
    };
    let lik = GaussianObservation { y: &y, variance: sigma2 };
    let a = run_augmented(&lik, &init, op, &priors, &part, &cfg, &[]).unwrap();
    assert!(max_rel(&a.mean, &g.mean) < 1e-10, "{}", max_rel(&a.mean, &g.mean));
    assert!(max_rel(&a.variances(&part), &g.variances(&part)) < 1e-10);
}

#[test]
fn augmented_graph_reduces_to_gaussian_loop() {
    gaussian_reduction(&DegradationOperator::identity(8, 8));
    gaussian_reduction(&DegradationOperator::random_mask(8, 8, 0.4, 1).unwrap());
}

#[test]
fn identity_fixed_point_matches_u_and_x() {
    let op = DegradationOperator::identity(12, 12);
    let (_, y) = counts(&op, 12, 4);
    let part = Partition::new(12, 12, 4, (0, 0)).unwrap();
    let cfg = EpConfig {
        stop_threshold: 1e-22,
        max_iters: 400,
        ..EpConfig::default()
    };
    let ep = run_ep_poisson(&y, &op, &count_prior(), &part, &cfg).unwrap();
    assert!(ep.converged);
    let u = ep.u.as_ref().unwrap();
    assert!(max_rel(&u.mean, &ep.mean) < 1e-6, "{}", max_rel(&u.mean, &ep.mean));
}

#[test]
fn blurred_counts_are_restored() {
    let op = DegradationOperator::conv2d(16, 16, Kernel::uniform(3).unwrap()).unwrap();
    let (x, y) = counts(&op, 16, 5);
    let part = Partition::new(16, 16, 4, (2, 2)).unwrap();
    let ep = run_ep_poisson(&y, &op, &count_prior(), &part, &EpConfig::default()).unwrap();
    assert!(ep.converged, "{} iterations", ep.iterations);
    assert!(ep.variances(&part).iter().all(|v| *v > 0.0 && v.is_finite()));
    assert!(psnr(&x, &ep.mean).unwrap() > psnr(&x, &y).unwrap());
    let trace = &ep.trace;
    assert!(trace.iter().all(|r| r.c1.unwrap() > 0.0));
}

#[test]
fn negative_kernels_are_rejected() {
    let op = DegradationOperator::conv2d(8, 8, Kernel::new(3, vec![0.0, -0.1, 0.0, 0.0, 1.2, 0.0, 0.0, -0.1, 0.0]).unwrap()).unwrap();
    let y = vec![1.0; 64];
    let part = Partition::new(8, 8, 4, (0, 0)).unwrap();
    assert!(run_ep_poisson(&y, &op, &count_prior(), &part, &EpConfig::default()).is_err());
}

#[test]
fn short_chain_agrees_with_ep_means() {
    let op = DegradationOperator::identity(8, 8);
    let (_, y) = counts(&op, 8, 6);
    let part = Partition::new(8, 8, 4, (0, 0)).unwrap();
    let gmm = count_prior();
    let ep = run_ep_poisson(&y, &op, &gmm, &part, &EpConfig::default()).unwrap();
    let opts = McmcOptions {
        sweeps: 100_000,
        burn_in: 5_000,
        seed: 3,
        likelihood: McmcLikelihood::Poisson,
        ..McmcOptions::default()
    };
    let mc = mcmc_poisson_reference(&y, &op, &gmm, &part, &opts).unwrap();
    let within = (0..64)
        .filter(|&i| (ep.mean[i] - mc.mean[i]).abs() <= 3.0 * mc.std_errors[i])
        .count();
    assert!(within as f64 >= 0.9 * 64.0, "{within}/64 within 3 standard errors");
}
