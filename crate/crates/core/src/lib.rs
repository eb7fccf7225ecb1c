//! Bayesian inference for linear mixed-effects models with HMC, integrating
//! Gaussian random effects out of the sampled target with block-structured
//! linear algebra and recovering them afterwards.

pub mod diagnostics;
pub mod error;
pub mod gradient;
pub mod harness;
pub mod linalg;
pub mod marginal;
pub mod model;
pub mod oracle;
pub mod sampler;

pub use error::{Error, Result};
