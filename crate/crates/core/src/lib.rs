//! Bayesian image restoration by expectation propagation with a patch-based GMM prior.
//!
//! Gaussian and Poisson observation models, block-structured approximate posteriors,
//! product-of-experts fusion over shifted partitions and EP-EM estimation of the prior
//! offset, patch-mean variance and scale. [`pipeline::run_pipeline`] is the entry point.

pub mod cg;
pub mod config;
pub mod ep;
pub mod epem;
pub mod error;
pub mod forward;
pub mod gmm;
pub mod image;
pub mod kl;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod partition;
pub mod pipeline;
pub mod poe;
pub mod quadrature;
pub mod rectified;
pub mod rng;
pub mod special;
pub mod structured;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
