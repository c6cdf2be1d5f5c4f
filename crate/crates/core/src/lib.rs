//! Bayesian Poisson-lognormal matrix factor model for population × time × age
//! count panels.
//!
//! Counts `y[i,t,x]` are Poisson with intensity `O[i,t,x]·exp(z[i,t,x])`, and each
//! population's latent `T×A` surface factorizes as `Z_i = F_T Λ_i F_A' + E_i`.
//! Time factors follow random walks with drift, age factors carry a first-order
//! ICAR smoothness prior. Estimation is a data-augmentation Gibbs sampler with
//! adaptive Metropolis steps for the latent surface.
//!
//! Module map:
//! - [`data`]: count panels, CSV ingestion, the `log(1+y)` transform
//! - [`priors`]: prior hyperparameters and random-walk / ICAR precision structure
//! - [`sampler`]: model state, full conditionals, the chain driver, draw storage
//! - [`forecast`]: predictive simulation of factors, latent surfaces and counts
//! - [`hosvd`]: ex-post orthogonal factor extraction from fitted surfaces
//! - [`benchmarks`]: random-walk and SVD-factorization competitor forecasters
//! - [`eval`]: metrics, cross-validation grids and rolling-origin evaluation
//! - [`simulate`]: synthetic panels drawn from the model, recovery summaries

pub mod benchmarks;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod forecast;
pub mod hosvd;
pub mod linalg;
pub mod params;
pub mod priors;
pub mod rng;
pub mod sampler;
pub mod simulate;
pub mod stats;

mod par;

pub use data::{CountPanel, LogPanel, PanelSchema};
pub use error::{Error, Result};
pub use priors::PriorSpec;
pub use sampler::{DrawStore, ModelState, SamplerConfig};
