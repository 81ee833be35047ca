//! Bayesian latent factor analysis with a mixture of sparse and dense factors.
//!
//! The model decomposes an observation matrix `Y (n x p)` into latent factors
//! `X (n x K)`, loadings `Lambda (K x p)`, and idiosyncratic noise with diagonal
//! covariance `Psi`. Shrinkage on the loading matrix is applied at three levels
//! (element, factor, global) through a gamma hierarchy equivalent to stacked
//! three-parameter-beta priors, and each factor is assigned to a sparse or a
//! dense mixture component by a latent indicator.
//!
//! Two inference engines are provided: MAP-EM ([`em::fit_em`]) and a Gibbs
//! sampler ([`gibbs::run_gibbs`]). Supporting modules cover stability
//! statistics for comparing recovered matrices ([`stability`]), the synthetic
//! data generator used for benchmarking ([`simgen`]), and post-processing of
//! fitted states ([`postprocess`]).

pub mod densities;
pub mod em;
mod error;
pub mod gibbs;
pub mod postprocess;
pub mod simgen;
pub mod stability;
pub mod tsv;
pub mod types;

pub use error::Error;
pub use types::{DataMatrix, FactorState, Hyperparameters, ShrinkageState, SimTruth};

pub type Result<T> = std::result::Result<T, Error>;
