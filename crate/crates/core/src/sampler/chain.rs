//! The Gibbs sweep and the chain driver.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;

use crate::config::{join, KeyValues};
use crate::data::CountPanel;
use crate::error::{invalid, Error, Result};
use crate::par;
use crate::priors::PriorSpec;
use crate::rng::{stream, Tag};
use crate::stats::{sample_inverse_gamma, sample_poisson, RunningMoments};

use super::conditionals::{
    loadings_conditional_with, noise_conditional_from, update_age_factor_with, update_drift,
    update_smoothing_variances, update_time_factor_with,
};
use super::init::initialize_auto;
use super::latent::{update_population, AdaptState, CellAdapt, LatentData};
use super::state::{Dims, ModelState};
use super::store::DrawStore;

/// One block of the Gibbs sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Latent,
    Loadings,
    AgeFactors,
    TimeFactors,
    Drift,
    Smoothing,
    Noise,
}

impl Block {
    pub const DEFAULT_ORDER: [Block; 7] = [
        Block::Latent,
        Block::Loadings,
        Block::AgeFactors,
        Block::TimeFactors,
        Block::Drift,
        Block::Smoothing,
        Block::Noise,
    ];

    fn name(self) -> &'static str {
        match self {
            Block::Latent => "latent",
            Block::Loadings => "loadings",
            Block::AgeFactors => "age",
            Block::TimeFactors => "time",
            Block::Drift => "drift",
            Block::Smoothing => "smoothing",
            Block::Noise => "noise",
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Block::DEFAULT_ORDER
            .into_iter()
            .find(|b| b.name() == s.trim())
            .ok_or_else(|| Error::Parse(format!("unknown sampler block '{s}'")))
    }
}

/// Run-length, seeding and bookkeeping options of a chain.
///
/// `n_iterations` counts every sweep including burn-in, so a run keeps
/// `floor((n_iterations - n_burnin) / thin)` draws.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_iterations: usize,
    pub n_burnin: usize,
    pub thin: usize,
    pub seed: u64,
    pub update_order: Vec<Block>,
    pub ridge: f64,
    pub adapt_batch: usize,
    pub target_accept: f64,
    /// Keep every retained draw of `F_T`, `F_A`, `Λ`, `κ`, `τ`, `σ²` (needed for forecasting).
    pub retain_factors: bool,
    /// Accumulate the posterior predictive mean of `log(1 + y_rep)` per cell.
    pub track_predictive: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_iterations: 32_500,
            n_burnin: 7_500,
            thin: 10,
            seed: 1,
            update_order: Block::DEFAULT_ORDER.to_vec(),
            ridge: 1e-8,
            adapt_batch: 50,
            target_accept: 0.44,
            retain_factors: true,
            track_predictive: true,
        }
    }
}

const CONFIG_KEYS: [&str; 10] = [
    "n_iterations",
    "n_burnin",
    "thin",
    "seed",
    "update_order",
    "ridge",
    "adapt_batch",
    "target_accept",
    "retain_factors",
    "track_predictive",
];

impl SamplerConfig {
    /// Short run settings for tests and previews.
    pub fn quick(n_iterations: usize, n_burnin: usize, seed: u64) -> Self {
        Self {
            n_iterations,
            n_burnin,
            thin: 1,
            seed,
            ..Self::default()
        }
    }

    pub fn n_draws(&self) -> usize {
        self.n_iterations.saturating_sub(self.n_burnin) / self.thin.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_burnin >= self.n_iterations {
            return invalid("n_burnin must be smaller than n_iterations");
        }
        if self.thin == 0 {
            return invalid("thin must be at least 1");
        }
        if !(self.ridge >= 0.0) {
            return invalid("ridge must be non-negative");
        }
        if self.adapt_batch == 0 {
            return invalid("adapt_batch must be positive");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return invalid("target_accept must lie in (0, 1)");
        }
        Ok(())
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(&CONFIG_KEYS)?;
        let d = Self::default();
        let cfg = Self {
            n_iterations: kv.get_or("n_iterations", d.n_iterations)?,
            n_burnin: kv.get_or("n_burnin", d.n_burnin)?,
            thin: kv.get_or("thin", d.thin)?,
            seed: kv.get_or("seed", d.seed)?,
            update_order: kv.get_list("update_order")?.unwrap_or(d.update_order),
            ridge: kv.get_or("ridge", d.ridge)?,
            adapt_batch: kv.get_or("adapt_batch", d.adapt_batch)?,
            target_accept: kv.get_or("target_accept", d.target_accept)?,
            retain_factors: kv.get_or("retain_factors", d.retain_factors)?,
            track_predictive: kv.get_or("track_predictive", d.track_predictive)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("n_iterations", self.n_iterations);
        kv.set("n_burnin", self.n_burnin);
        kv.set("thin", self.thin);
        kv.set("seed", self.seed);
        kv.set("update_order", join(&self.update_order));
        kv.set("ridge", self.ridge);
        kv.set("adapt_batch", self.adapt_batch);
        kv.set("target_accept", self.target_accept);
        kv.set("retain_factors", self.retain_factors);
        kv.set("track_predictive", self.track_predictive);
        kv
    }
}

/// Starting point of a chain.
#[derive(Debug, Clone)]
pub enum Init {
    Auto,
    State(ModelState),
}

/// Counters of numerical safeguards that fired during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Latent proposals rejected because the log acceptance ratio was not finite.
    pub nonfinite_rejections: u64,
    /// Smoothing-variance draws replaced by the floor.
    pub tau_floored: u64,
    /// Factor conditionals that had no likelihood information and received the ridge.
    pub ridge_applied: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChainStatus {
    Completed,
    /// The sweep at `iteration` failed; draws retained before it are kept.
    Aborted { iteration: usize, reason: String },
}

impl ChainStatus {
    pub fn is_completed(&self) -> bool {
        matches!(self, ChainStatus::Completed)
    }
}

/// A running Gibbs sampler: the current state plus everything needed to
/// advance it by one sweep.
#[derive(Debug, Clone)]
pub struct Chain {
    prior: PriorSpec,
    config: SamplerConfig,
    data: LatentData,
    state: ModelState,
    adapt: AdaptState,
    resid: Vec<DMatrix<f64>>,
    diagnostics: Diagnostics,
    iteration: usize,
}

impl Chain {
    pub fn new(panel: &CountPanel, prior: &PriorSpec, config: &SamplerConfig, init: Init) -> Result<Self> {
        config.validate()?;
        let (n, t, a) = panel.dims();
        prior.validate(n)?;
        if t < 2 || a < 2 {
            return invalid("the random-walk priors need at least two years and two ages");
        }
        let state = match init {
            Init::Auto => initialize_auto(panel, prior, &mut stream(config.seed, 0, Tag::Init, 0)),
            Init::State(s) => {
                s.validate()?;
                let d = s.dims();
                if (d.n, d.t, d.a, d.q, d.r) != (n, t, a, prior.q, prior.r) {
                    return invalid("initial state dimensions do not match the panel and prior");
                }
                s
            }
        };
        let data = LatentData::new(panel);
        let mut adapt = AdaptState::new(n * t * a, config.target_accept, config.adapt_batch, config.n_burnin)?;
        adapt.initialize_scales(&state, &data);
        let resid = (0..n).map(|i| state.residual(i)).collect();
        Ok(Self {
            prior: prior.clone(),
            config: config.clone(),
            data,
            state,
            adapt,
            resid,
            diagnostics: Diagnostics::default(),
            iteration: 0,
        })
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn adapt(&self) -> &AdaptState {
        &self.adapt
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    /// Number of completed sweeps.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// Swaps in new counts on the same grid; used by successive-conditional
    /// simulation, where the data are redrawn between sweeps.
    pub fn set_counts(&mut self, panel: &CountPanel) -> Result<()> {
        let d = self.state.dims();
        if panel.dims() != (d.n, d.t, d.a) {
            return invalid("replacement panel has different dimensions");
        }
        self.data = LatentData::new(panel);
        Ok(())
    }

    /// Poisson log-likelihood of the observed cells at the current latent surfaces.
    pub fn loglik(&self) -> f64 {
        (0..self.data.n_pop()).map(|i| self.data.loglik(i, &self.state.z[i])).sum()
    }

    /// Runs one full sweep in the configured block order.
    pub fn step(&mut self) -> Result<()> {
        let it = self.iteration as u64;
        let order = self.config.update_order.clone();
        for block in order {
            match block {
                Block::Latent => self.update_latent(it),
                Block::Loadings => self.update_loadings(it)?,
                Block::AgeFactors => {
                    for r in 0..self.prior.r {
                        let mut rng = stream(self.config.seed, it, Tag::Factors, r as u64);
                        let ridged = update_age_factor_with(
                            &mut self.state,
                            &self.prior,
                            r,
                            self.config.ridge,
                            &mut self.resid,
                            &mut rng,
                        )?;
                        self.note_ridge(ridged, "age", r);
                    }
                }
                Block::TimeFactors => {
                    for q in 0..self.prior.q {
                        let mut rng = stream(self.config.seed, it, Tag::Factors, (self.prior.r + q) as u64);
                        let ridged = update_time_factor_with(
                            &mut self.state,
                            &self.prior,
                            q,
                            self.config.ridge,
                            &mut self.resid,
                            &mut rng,
                        )?;
                        self.note_ridge(ridged, "time", q);
                    }
                }
                Block::Drift => {
                    let mut rng = stream(self.config.seed, it, Tag::Scalars, 0);
                    for q in 0..self.prior.q {
                        update_drift(&mut self.state, &self.prior, q, &mut rng);
                    }
                }
                Block::Smoothing => {
                    let mut rng = stream(self.config.seed, it, Tag::Scalars, 1);
                    self.diagnostics.tau_floored += update_smoothing_variances(&mut self.state, &self.prior, &mut rng) as u64;
                }
                Block::Noise => self.update_noise(it),
            }
        }
        self.check_finite()?;
        self.adapt.end_iteration(self.iteration);
        self.iteration += 1;
        Ok(())
    }

    fn note_ridge(&mut self, ridged: bool, what: &str, k: usize) {
        if ridged {
            self.diagnostics.ridge_applied += 1;
            log::debug!("iteration {}: {what} factor {k} had no likelihood information; ridge added", self.iteration);
        }
    }

    fn update_latent(&mut self, it: u64) {
        let cells = self.data.t * self.data.a;
        let seed = self.config.seed;
        let ModelState { z, f_t, f_a, lambda, sigma2, .. } = &mut self.state;
        let (f_t, f_a, lambda, sigma2) = (&*f_t, &*f_a, &*lambda, &*sigma2);
        let data = &self.data;
        let adapt = &mut self.adapt;
        let mut jobs: Vec<_> = z
            .iter_mut()
            .zip(self.resid.iter_mut())
            .zip(adapt.accept_counts.chunks_mut(cells))
            .zip(adapt.proposal_counts.chunks_mut(cells))
            .zip(adapt.log_step.chunks(cells))
            .map(|((((z, res), acc), prop), step)| (z, res, acc, prop, step, 0u64))
            .collect();
        par::for_each_mut(&mut jobs, |i, (z, res, acc, prop, step, nonfinite)| {
            let mean = f_t * &lambda[i] * f_a.transpose();
            let mut rng = stream(seed, it, Tag::Latent, i as u64);
            let view = CellAdapt {
                log_step: step,
                accept: acc,
                proposed: prop,
            };
            *nonfinite = update_population(z, &mean, sigma2[i], data, i, view, &mut rng);
            **res = &**z - mean;
        });
        let nonfinite: u64 = jobs.iter().map(|j| j.5).sum();
        if nonfinite > 0 {
            log::warn!("iteration {}: {nonfinite} latent proposal(s) had a non-finite acceptance ratio", self.iteration);
            self.diagnostics.nonfinite_rejections += nonfinite;
        }
    }

    fn update_loadings(&mut self, it: u64) -> Result<()> {
        let gram_t = self.state.f_t.transpose() * &self.state.f_t;
        let gram_a = self.state.f_a.transpose() * &self.state.f_a;
        let (q, r) = (self.prior.q, self.prior.r);
        let seed = self.config.seed;
        let state = &self.state;
        let prior = &self.prior;
        let draws: Vec<Result<DMatrix<f64>>> = par::map_collect(state.z.len(), |i| {
            let cond = loadings_conditional_with(state, prior, i, &gram_t, &gram_a);
            let mut rng = stream(seed, it, Tag::Loadings, i as u64);
            let v = cond.sample("loadings", &mut rng)?;
            Ok(DMatrix::from_column_slice(q, r, v.as_slice()))
        });
        for (i, d) in draws.into_iter().enumerate() {
            self.state.lambda[i] = d?;
        }
        let state = &self.state;
        par::for_each_mut(&mut self.resid, |i, res| {
            *res = &state.z[i] - state.fitted_mean(i);
        });
        Ok(())
    }

    fn update_noise(&mut self, it: u64) {
        let seed = self.config.seed;
        let (prior, data, resid) = (&self.prior, &self.data, &self.resid);
        self.state.sigma2 = par::map_collect(resid.len(), |i| {
            let (shape, scale) = noise_conditional_from(prior, &resid[i], &data.observed[i]);
            sample_inverse_gamma(shape, scale, &mut stream(seed, it, Tag::Noise, i as u64))
        });
    }

    fn check_finite(&self) -> Result<()> {
        let s = &self.state;
        let bad = |v: &f64| !v.is_finite();
        let block = if s.sigma2.iter().any(bad) || s.sigma2.iter().any(|v| *v <= 0.0) {
            Some("noise variances")
        } else if s.tau_t.iter().chain(&s.tau_a).any(bad) {
            Some("smoothing variances")
        } else if s.f_t.iter().chain(s.f_a.iter()).chain(&s.kappa).any(bad) {
            Some("factors")
        } else if s.lambda.iter().any(|l| l.iter().any(bad)) {
            Some("loadings")
        } else if s.z.iter().any(|z| z.iter().any(bad)) {
            Some("latent surfaces")
        } else {
            None
        };
        match block {
            Some(b) => Err(Error::InvalidArgument(format!("non-finite values in {b}"))),
            None => Ok(()),
        }
    }

    /// Draws `log(1 + y_rep)` for every cell of population `i` from the
    /// Poisson layer at the current latent surface.
    pub(crate) fn predictive_log1p<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> Vec<f64> {
        let z = &self.state.z[i];
        let lo = &self.data.log_offset[i];
        z.iter()
            .zip(lo)
            .map(|(zc, l)| (sample_poisson((l + zc).exp(), rng) as f64).ln_1p())
            .collect()
    }
}

/// Runs a chain to completion and collects its draws.
pub fn run_chain(panel: &CountPanel, prior: &PriorSpec, config: &SamplerConfig, init: Init) -> Result<DrawStore> {
    run_chain_with_observer(panel, prior, config, init, |_, _| {})
}

/// As [`run_chain`], calling `observer(draw_index, state)` at every retained draw.
///
/// Validation problems are returned as errors. A failure inside a sweep ends
/// the chain early and is reported through the store's status instead.
pub fn run_chain_with_observer<F>(
    panel: &CountPanel,
    prior: &PriorSpec,
    config: &SamplerConfig,
    init: Init,
    mut observer: F,
) -> Result<DrawStore>
where
    F: FnMut(usize, &ModelState),
{
    let mut chain = Chain::new(panel, prior, config, init)?;
    let mut store = DrawStore::empty(chain.state().dims(), prior.clone(), config.clone());
    let dims = store.dims;
    let cells = dims.t * dims.a;
    for it in 0..config.n_iterations {
        if let Err(e) = chain.step() {
            log::error!("chain aborted at iteration {it}: {e}");
            store.status = ChainStatus::Aborted {
                iteration: it,
                reason: e.to_string(),
            };
            break;
        }
        if it < config.n_burnin || (it + 1 - config.n_burnin) % config.thin != 0 {
            continue;
        }
        let state = chain.state();
        store.record(state, chain.loglik());
        if config.track_predictive {
            let rows: Vec<Vec<f64>> = par::map_collect(dims.n, |i| {
                chain.predictive_log1p(i, &mut stream(config.seed, it as u64, Tag::Predictive, i as u64))
            });
            for (i, row) in rows.iter().enumerate() {
                // row is column-major T×A; the store is (i, t, x) row-major
                for (c, v) in row.iter().enumerate() {
                    let (t, x) = (c % dims.t, c / dims.t);
                    store.predictive[i * cells + t * dims.a + x].push(*v);
                }
            }
        }
        observer(store.n_draws() - 1, state);
    }
    store.acceptance = reorder_cells(&chain.adapt().acceptance_rates(), dims);
    store.diagnostics = chain.diagnostics().clone();
    Ok(store)
}

/// Converts per-population column-major cell order to panel order `(i, t, x)`.
fn reorder_cells<T: Clone>(values: &[T], d: Dims) -> Vec<T> {
    let cells = d.t * d.a;
    (0..d.n * cells)
        .map(|k| {
            let (i, rem) = (k / cells, k % cells);
            let (t, x) = (rem / d.a, rem % d.a);
            values[i * cells + x * d.t + t].clone()
        })
        .collect()
}

/// Empty moment accumulators for every panel cell.
pub(crate) fn cell_moments(d: Dims) -> Vec<RunningMoments> {
    vec![RunningMoments::default(); d.n * d.t * d.a]
}
