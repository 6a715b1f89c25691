//! Reference computations used to validate the EP code on small problems.

pub mod brute;
pub mod dense;
pub mod exact;
pub mod mcmc;
pub mod naive;

pub use brute::{brute_force_tilted, BruteMoments};
pub use dense::{dense_reference_moments, DenseMoments};
pub use exact::{exact_diagonal_gaussian_posterior, ExactPosterior};
pub use mcmc::{mcmc_poisson_reference, McmcLikelihood, McmcOptions, McmcResult};
pub use naive::{naive_full_ep, NaiveEpOptions, NaiveEpResult};
