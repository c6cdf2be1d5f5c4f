//! Latent log-intensity updates: adaptive random-walk Metropolis on observed
//! cells, exact Gaussian draws on masked cells.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::CountPanel;
use crate::error::{invalid, Result};
use crate::stats::ln_factorial;

use super::state::ModelState;

/// `log P(y; O e^z) = y (log O + z) - O e^z - log y!`.
pub fn poisson_loglik_cell(y: u64, offset: f64, z: f64) -> f64 {
    let yf = y as f64;
    let lin = if y == 0 { 0.0 } else { yf * (offset.ln() + z) };
    lin - offset * z.exp() - ln_factorial(y)
}

/// Panel data rearranged per population in column-major `T×A` order, which is
/// the layout of the latent surfaces.
#[derive(Debug, Clone)]
pub struct LatentData {
    pub(crate) t: usize,
    pub(crate) a: usize,
    pub(crate) y: Vec<Vec<f64>>,
    pub(crate) log_offset: Vec<Vec<f64>>,
    pub(crate) observed: Vec<Vec<bool>>,
    pub(crate) ln_fact: Vec<Vec<f64>>,
}

impl LatentData {
    pub fn new(panel: &CountPanel) -> Self {
        let (n, t, a) = panel.dims();
        let per = |f: &dyn Fn(usize, usize, usize) -> f64| -> Vec<Vec<f64>> {
            (0..n)
                .map(|i| (0..a).flat_map(|x| (0..t).map(move |tt| (tt, x))).map(|(tt, x)| f(i, tt, x)).collect())
                .collect()
        };
        Self {
            t,
            a,
            y: per(&|i, tt, x| panel.count(i, tt, x) as f64),
            log_offset: per(&|i, tt, x| panel.offset(i, tt, x).ln()),
            ln_fact: per(&|i, tt, x| ln_factorial(panel.count(i, tt, x))),
            observed: (0..n)
                .map(|i| (0..a).flat_map(|x| (0..t).map(move |tt| (tt, x))).map(|(tt, x)| panel.is_observed(i, tt, x)).collect())
                .collect(),
        }
    }

    pub fn n_pop(&self) -> usize {
        self.y.len()
    }

    /// Poisson log-likelihood of population `i`'s observed cells at surface `z`.
    pub fn loglik(&self, i: usize, z: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for (c, zc) in z.iter().enumerate() {
            if self.observed[i][c] {
                let lo = self.log_offset[i][c];
                s += self.y[i][c] * (lo + zc) - (lo + zc).exp() - self.ln_fact[i][c];
            }
        }
        s
    }
}

/// Per-cell proposal scales and acceptance bookkeeping.
///
/// Step sizes adapt in batches of `batch_len` iterations: after batch `b` each
/// cell's log step moves by `±min(0.05, b^{-1/2})` toward `target_accept`.
/// Adaptation stops at `adaptation_horizon`, after which the counters
/// accumulate the post-adaptation acceptance rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptState {
    /// Layout: population-major, column-major `T×A` within a population.
    pub log_step: Vec<f64>,
    pub accept_counts: Vec<u32>,
    pub proposal_counts: Vec<u32>,
    pub target_accept: f64,
    pub batch_len: usize,
    pub adaptation_horizon: usize,
    batches_done: usize,
    in_batch: usize,
}

impl AdaptState {
    pub fn new(n_cells: usize, target_accept: f64, batch_len: usize, adaptation_horizon: usize) -> Result<Self> {
        if !(target_accept > 0.0 && target_accept < 1.0) {
            return invalid("target acceptance must lie in (0, 1)");
        }
        if batch_len == 0 {
            return invalid("adaptation batch length must be positive");
        }
        Ok(Self {
            log_step: vec![0.0; n_cells],
            accept_counts: vec![0; n_cells],
            proposal_counts: vec![0; n_cells],
            target_accept,
            batch_len,
            adaptation_horizon,
            batches_done: 0,
            in_batch: 0,
        })
    }

    /// Laplace-style starting scales: `2.4 / sqrt(O e^z + 1/σ²)` at the current state.
    pub fn initialize_scales(&mut self, state: &ModelState, data: &LatentData) {
        let cells = data.t * data.a;
        for (i, z) in state.z.iter().enumerate() {
            let prec_prior = 1.0 / state.sigma2[i];
            for c in 0..cells {
                let info = (data.log_offset[i][c] + z[c]).exp().min(1e12) + prec_prior;
                self.log_step[i * cells + c] = (2.4 / info.sqrt()).ln();
            }
        }
    }

    /// Call once per completed iteration (0-based index).
    pub fn end_iteration(&mut self, iteration: usize) {
        if iteration < self.adaptation_horizon {
            self.in_batch += 1;
            if self.in_batch == self.batch_len {
                self.batches_done += 1;
                let delta = (1.0 / (self.batches_done as f64).sqrt()).min(0.05);
                for k in 0..self.log_step.len() {
                    if self.proposal_counts[k] == 0 {
                        continue;
                    }
                    let rate = self.accept_counts[k] as f64 / self.proposal_counts[k] as f64;
                    self.log_step[k] += if rate > self.target_accept { delta } else { -delta };
                }
                self.reset_counts();
                self.in_batch = 0;
            }
        }
        if iteration + 1 == self.adaptation_horizon {
            self.reset_counts();
        }
    }

    fn reset_counts(&mut self) {
        self.accept_counts.iter_mut().for_each(|c| *c = 0);
        self.proposal_counts.iter_mut().for_each(|c| *c = 0);
    }

    /// Acceptance rate per cell since the last reset; `None` for cells never proposed.
    pub fn acceptance_rates(&self) -> Vec<Option<f64>> {
        self.accept_counts
            .iter()
            .zip(&self.proposal_counts)
            .map(|(&a, &p)| (p > 0).then(|| a as f64 / p as f64))
            .collect()
    }
}

/// Mutable per-population view of the adaptation state.
pub(crate) struct CellAdapt<'a> {
    pub log_step: &'a [f64],
    pub accept: &'a mut [u32],
    pub proposed: &'a mut [u32],
}

/// Updates every cell of one population. Returns the number of proposals
/// rejected for a non-finite acceptance ratio.
pub(crate) fn update_population<R: Rng + ?Sized>(
    z: &mut DMatrix<f64>,
    mean: &DMatrix<f64>,
    sigma2: f64,
    data: &LatentData,
    i: usize,
    adapt: CellAdapt<'_>,
    rng: &mut R,
) -> u64 {
    let sd = sigma2.sqrt();
    let half_prec = 0.5 / sigma2;
    let y = &data.y[i];
    let lo = &data.log_offset[i];
    let obs = &data.observed[i];
    let mut nonfinite = 0;
    let zs = z.as_mut_slice();
    let ms = mean.as_slice();
    for c in 0..zs.len() {
        let m = ms[c];
        let e: f64 = rng.sample(StandardNormal);
        if !obs[c] {
            zs[c] = m + sd * e;
            continue;
        }
        let cur = zs[c];
        let prop = cur + adapt.log_step[c].exp() * e;
        let dc = cur - m;
        let dp = prop - m;
        let log_ratio = y[c] * (prop - cur) - ((lo[c] + prop).exp() - (lo[c] + cur).exp())
            - (dp * dp - dc * dc) * half_prec;
        adapt.proposed[c] += 1;
        let u: f64 = rng.random();
        if !log_ratio.is_finite() {
            nonfinite += 1;
            continue;
        }
        if u.ln() < log_ratio {
            zs[c] = prop;
            adapt.accept[c] += 1;
        }
    }
    nonfinite
}

/// One sequential pass over all populations with a single RNG.
///
/// The chain driver uses per-population streams instead; this entry point is
/// for direct use and tests. Returns the non-finite rejection count.
pub fn update_latent_z<R: Rng + ?Sized>(
    state: &mut ModelState,
    panel: &CountPanel,
    adapt: &mut AdaptState,
    rng: &mut R,
) -> u64 {
    let data = LatentData::new(panel);
    let cells = data.t * data.a;
    let mut nonfinite = 0;
    for i in 0..state.z.len() {
        let mean = state.fitted_mean(i);
        let range = i * cells..(i + 1) * cells;
        let view = CellAdapt {
            log_step: &adapt.log_step[range.clone()],
            accept: &mut adapt.accept_counts[range.clone()],
            proposed: &mut adapt.proposal_counts[range],
        };
        nonfinite += update_population(&mut state.z[i], &mean, state.sigma2[i], &data, i, view, rng);
    }
    if nonfinite > 0 {
        log::warn!("{nonfinite} latent proposal(s) rejected for a non-finite acceptance ratio");
    }
    nonfinite
}
