//! Data-augmentation Gibbs sampler.
//!
//! A sweep imputes the latent log intensities `Z` with adaptive Metropolis
//! steps and then updates the Gaussian layer (loadings, age factors, time
//! factors, drifts, smoothing variances, noise variances) from closed-form
//! conditionals. Only the latent step reads counts.

pub mod chain;
pub mod conditionals;
pub mod init;
pub mod latent;
pub mod state;
pub mod store;

pub use chain::{run_chain, run_chain_with_observer, Block, Chain, ChainStatus, Diagnostics, Init, SamplerConfig};
pub use conditionals::{
    age_factor_conditional, drift_conditional, loadings_conditional, noise_conditional, time_factor_conditional,
    update_age_factor, update_drift, update_loadings, update_noise_variances, update_smoothing_variances,
    update_time_factor, BandedConditional, GaussianConditional,
};
pub use init::initialize_auto;
pub use latent::{poisson_loglik_cell, update_latent_z, AdaptState, LatentData};
pub use state::{fitted_mean, Dims, FactorDraw, ModelState};
pub use store::{read_state_dir, write_state_dir, DrawStore};
