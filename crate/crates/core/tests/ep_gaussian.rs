use patch_ep::ep::gaussian::run_ep_gaussian;
use patch_ep::ep::{EpConfig, StructureChoice};
use patch_ep::forward::{simulate, DegradationOperator, NoiseModel};
use patch_ep::gmm::{adapt, AdaptedGmm, Theta};
use patch_ep::oracle::exact_diagonal_gaussian_posterior;
use patch_ep::partition::Partition;
use patch_ep::synth::{synthetic_image, train_synthetic_gmm};

fn prior(k: usize, patch: usize) -> AdaptedGmm {
    let base = train_synthetic_gmm(k, patch, 3, 24, 11).unwrap();
    adapt(&base, Theta::new(0.45, 0.04, 1.0).unwrap()).unwrap()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1e-12)).fold(0.0, f64::max)
}

fn check_exact(op: &DegradationOperator, structure: StructureChoice, shift: (usize, usize), k: usize) {
    let gmm = prior(k, 4);
    let part = Partition::new(8, 8, 4, shift).unwrap();
    let x = synthetic_image(8, 8, 5).unwrap();
    let sigma2 = 0.1f64.powi(2);
    let y = simulate(op, x.data(), NoiseModel::Gaussian { variance: sigma2 }, 9).unwrap();
    let cfg = EpConfig {
        structure,
        ..EpConfig::default()
    };
    let ep = run_ep_gaussian(&y, op, sigma2, &gmm, &part, &cfg).unwrap();
    let exact = exact_diagonal_gaussian_posterior(&y, op, sigma2, &gmm, &part).unwrap();
    assert!(ep.converged);
    let em = max_rel(&ep.mean, &exact.mean);
    let ev = max_rel(&ep.variances(&part), &exact.variances);
    assert!(em < 1e-6 && ev < 1e-6, "mean {em:e} var {ev:e}");
}

#[test]
fn denoising_matches_exact_posterior() {
    let op = DegradationOperator::identity(8, 8);
    check_exact(&op, StructureChoice::Auto, (0, 0), 3);
    check_exact(&op, StructureChoice::Auto, (1, 3), 3);
}

#[test]
fn inpainting_matches_exact_posterior() {
    let op = DegradationOperator::random_mask(8, 8, 0.6, 2).unwrap();
    check_exact(&op, StructureChoice::Auto, (0, 0), 3);
    check_exact(&op, StructureChoice::Auto, (2, 1), 3);
}

#[test]
fn block_structure_is_exact_for_a_gaussian_prior() {
    let op = DegradationOperator::identity(8, 8);
    check_exact(&op, StructureChoice::BlockDiagonal, (0, 0), 1);
    check_exact(&op, StructureChoice::BlockDiagonal, (3, 2), 1);
    let mask = DegradationOperator::random_mask(8, 8, 0.3, 4).unwrap();
    check_exact(&mask, StructureChoice::BlockDiagonal, (1, 1), 1);
}
