//! Predictive simulation of future time factors, latent surfaces and counts.
//!
//! Each retained posterior draw is pushed forward by iterating the
//! random walk with drift `f_{t+1} = f_t + κ + η`, `η ~ N(0, τ_T)`, and the
//! future surface `f_{T+h} Λ_i F_A'` is turned into counts through the
//! Poisson-lognormal layer.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::CountPanel;
use crate::error::{invalid, Error, Result};
use crate::par;
use crate::rng::{stream, Tag};
use crate::sampler::{poisson_loglik_cell, DrawStore, FactorDraw};
use crate::stats::{quantile, sample_poisson, LogMeanExp};

/// Latent values above this are capped before exponentiation.
pub const Z_CAP: f64 = 30.0;

/// Simulates `h` future rows of the time factors from one draw.
pub fn forecast_factors<R: Rng + ?Sized>(draw: &FactorDraw, h: usize, rng: &mut R) -> DMatrix<f64> {
    let (t, q) = draw.f_t.shape();
    let mut out = DMatrix::zeros(h, q);
    for k in 0..q {
        let sd = draw.tau_t[k].sqrt();
        let mut f = draw.f_t[(t - 1, k)];
        for row in 0..h {
            f += draw.kappa[k] + sd * rng.sample::<f64, _>(StandardNormal);
            out[(row, k)] = f;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastOptions {
    pub horizon: usize,
    /// Add the idiosyncratic `N(0, σ²_i)` term to each future latent cell.
    pub include_idiosyncratic: bool,
    /// Predictive replicates simulated per posterior draw.
    pub replicates: usize,
    pub seed: u64,
    /// Keep the latent draws as well as the counts.
    pub keep_latent: bool,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        Self {
            horizon: 5,
            include_idiosyncratic: true,
            replicates: 1,
            seed: 1,
            keep_latent: false,
        }
    }
}

/// Monte Carlo predictive draws for horizons `1..=H`.
///
/// Cell vectors are indexed `(i, h, x)` with `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSet {
    pub n: usize,
    pub a: usize,
    pub horizons: Vec<usize>,
    /// Future factor rows, `H×Q` per draw.
    pub factor_draws: Vec<DMatrix<f64>>,
    pub count_draws: Vec<Vec<u64>>,
    /// Empty unless requested.
    pub latent_draws: Vec<Vec<f64>>,
    pub population_labels: Vec<String>,
    pub age_labels: Vec<String>,
    /// Year label of the forecast origin (the last observed year).
    pub origin_year: i64,
    pub seed: u64,
    /// Cells whose latent value was capped at [`Z_CAP`].
    pub capped_cells: u64,
}

impl ForecastSet {
    pub fn n_draws(&self) -> usize {
        self.count_draws.len()
    }

    pub fn cell(&self, i: usize, h: usize, x: usize) -> usize {
        (i * self.horizons.len() + (h - 1)) * self.a + x
    }

    /// Draws of one cell's count.
    pub fn cell_counts(&self, i: usize, h: usize, x: usize) -> Vec<f64> {
        let c = self.cell(i, h, x);
        self.count_draws.iter().map(|d| d[c] as f64).collect()
    }
}

struct DrawSim {
    factors: DMatrix<f64>,
    latent: Vec<f64>,
    counts: Vec<u64>,
    capped: u64,
}

fn simulate_draw<R: Rng + ?Sized>(
    draw: &FactorDraw,
    offsets: &[f64],
    a: usize,
    opts: &ForecastOptions,
    rng: &mut R,
) -> DrawSim {
    let h = opts.horizon;
    let n = draw.lambda.len();
    let factors = forecast_factors(draw, h, rng);
    // (H×Q)(Q×R)(R×A) per population
    let mut latent = Vec::with_capacity(n * h * a);
    let mut counts = Vec::with_capacity(n * h * a);
    let mut capped = 0;
    let age_t = draw.f_a.transpose();
    for i in 0..n {
        let mean = &factors * &draw.lambda[i] * &age_t;
        let sd = if opts.include_idiosyncratic { draw.sigma2[i].sqrt() } else { 0.0 };
        for row in 0..h {
            for x in 0..a {
                let mut z = mean[(row, x)] + sd * rng.sample::<f64, _>(StandardNormal);
                if z > Z_CAP {
                    capped += 1;
                    z = Z_CAP;
                }
                counts.push(sample_poisson(offsets[i * a + x] * z.exp(), rng));
                latent.push(z);
            }
        }
    }
    DrawSim {
        factors,
        latent,
        counts,
        capped,
    }
}

/// Offsets carried forward from the last observed year, indexed `(i, x)`.
fn origin_offsets(panel: &CountPanel) -> Vec<f64> {
    let (n, t, a) = panel.dims();
    (0..n).flat_map(|i| (0..a).map(move |x| (i, x))).map(|(i, x)| panel.offset(i, t - 1, x)).collect()
}

fn check_inputs(store: &DrawStore, panel: &CountPanel, opts: &ForecastOptions) -> Result<()> {
    if opts.horizon == 0 || opts.replicates == 0 {
        return invalid("horizon and replicates must be positive");
    }
    if store.factors.is_empty() {
        return invalid("the draw store holds no factor draws (fit with retain_factors = true)");
    }
    let d = store.dims;
    if panel.dims() != (d.n, d.t, d.a) {
        return invalid("panel does not match the fitted dimensions");
    }
    Ok(())
}

/// Predictive draws of future factors, latent surfaces and counts.
///
/// Future offsets repeat the last observed year's offsets. Draw `k`,
/// replicate `j` uses the stream `(seed, k, Forecast, j)`, so results do not
/// depend on scheduling.
pub fn forecast_counts(store: &DrawStore, panel: &CountPanel, opts: &ForecastOptions) -> Result<ForecastSet> {
    check_inputs(store, panel, opts)?;
    let a = store.dims.a;
    let offsets = origin_offsets(panel);
    let reps = opts.replicates;
    let sims: Vec<DrawSim> = par::map_collect(store.factors.len() * reps, |k| {
        let mut rng = stream(opts.seed, (k / reps) as u64, Tag::Forecast, (k % reps) as u64);
        simulate_draw(&store.factors[k / reps], &offsets, a, opts, &mut rng)
    });
    let capped_cells: u64 = sims.iter().map(|s| s.capped).sum();
    if capped_cells > 0 {
        log::warn!("{capped_cells} forecast cell draw(s) had latent values above {Z_CAP} and were capped");
    }
    let mut set = ForecastSet {
        n: store.dims.n,
        a,
        horizons: (1..=opts.horizon).collect(),
        factor_draws: Vec::with_capacity(sims.len()),
        count_draws: Vec::with_capacity(sims.len()),
        latent_draws: Vec::new(),
        population_labels: panel.population_labels().to_vec(),
        age_labels: panel.age_labels().to_vec(),
        origin_year: *panel.year_labels().last().expect("non-empty panel"),
        seed: opts.seed,
        capped_cells,
    };
    for s in sims {
        set.factor_draws.push(s.factors);
        set.count_draws.push(s.counts);
        if opts.keep_latent {
            set.latent_draws.push(s.latent);
        }
    }
    Ok(set)
}

/// Posterior predictive mean of `log(1 + y)` at each requested horizon,
/// accumulated without storing draws. Returns one `N×A` matrix per horizon.
///
/// Uses the same random streams as [`forecast_counts`], so the means agree
/// with those computed from a stored [`ForecastSet`].
pub fn forecast_log1p_mean(
    store: &DrawStore,
    panel: &CountPanel,
    horizons: &[usize],
    opts: &ForecastOptions,
) -> Result<Vec<DMatrix<f64>>> {
    let h_max = horizons.iter().copied().max().unwrap_or(0);
    if horizons.is_empty() || horizons.contains(&0) || h_max > opts.horizon {
        return invalid("horizons must lie in 1..=opts.horizon");
    }
    check_inputs(store, panel, opts)?;
    let (n, a) = (store.dims.n, store.dims.a);
    let offsets = origin_offsets(panel);
    let reps = opts.replicates;
    let total = store.factors.len() * reps;
    let sums: Vec<Vec<f64>> = par::map_collect(total, |k| {
        let mut rng = stream(opts.seed, (k / reps) as u64, Tag::Forecast, (k % reps) as u64);
        let sim = simulate_draw(&store.factors[k / reps], &offsets, a, opts, &mut rng);
        let mut out = Vec::with_capacity(horizons.len() * n * a);
        for &h in horizons {
            for i in 0..n {
                for x in 0..a {
                    out.push((sim.counts[(i * opts.horizon + h - 1) * a + x] as f64).ln_1p());
                }
            }
        }
        out
    });
    let mut acc = vec![0.0; horizons.len() * n * a];
    for s in &sums {
        acc.iter_mut().zip(s).for_each(|(a, v)| *a += v);
    }
    Ok((0..horizons.len())
        .map(|k| DMatrix::from_fn(n, a, |i, x| acc[(k * n + i) * a + x] / total as f64))
        .collect())
}

/// A held-out count to be scored against the predictive distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForecastTarget {
    pub i: usize,
    /// Steps ahead of the last training year, starting at 1.
    pub h: usize,
    pub x: usize,
    pub y: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetScore {
    /// Predictive mean of `log(1 + y)`.
    pub log1p_mean: f64,
    /// Log predictive score of the observed count.
    pub log_score: f64,
}

/// Predictive mean of `log(1 + y)` and the log predictive score
/// `log mean_s p(y | O·exp(z_s))` at each target, streaming over draws with
/// the same random streams as [`forecast_counts`].
pub fn forecast_scores(
    store: &DrawStore,
    panel: &CountPanel,
    targets: &[ForecastTarget],
    opts: &ForecastOptions,
) -> Result<Vec<TargetScore>> {
    check_inputs(store, panel, opts)?;
    let (n, a) = (store.dims.n, store.dims.a);
    if let Some(bad) = targets.iter().find(|g| g.i >= n || g.x >= a || g.h == 0 || g.h > opts.horizon) {
        return invalid(format!("forecast target {bad:?} is outside the forecast grid"));
    }
    let offsets = origin_offsets(panel);
    let reps = opts.replicates;
    let total = store.factors.len() * reps;
    let mut means = vec![0.0; targets.len()];
    let mut scores = vec![LogMeanExp::default(); targets.len()];
    const CHUNK: usize = 256;
    for lo in (0..total).step_by(CHUNK) {
        let hi = (lo + CHUNK).min(total);
        let chunk: Vec<Vec<(f64, f64)>> = par::map_collect(hi - lo, |j| {
            let k = lo + j;
            let mut rng = stream(opts.seed, (k / reps) as u64, Tag::Forecast, (k % reps) as u64);
            let sim = simulate_draw(&store.factors[k / reps], &offsets, a, opts, &mut rng);
            targets
                .iter()
                .map(|g| {
                    let c = (g.i * opts.horizon + g.h - 1) * a + g.x;
                    let ll = poisson_loglik_cell(g.y, offsets[g.i * a + g.x], sim.latent[c]);
                    ((sim.counts[c] as f64).ln_1p(), ll)
                })
                .collect()
        });
        for row in chunk {
            for (k, (m, ll)) in row.into_iter().enumerate() {
                means[k] += m;
                scores[k].push(ll);
            }
        }
    }
    Ok(means
        .into_iter()
        .zip(scores)
        .map(|(m, s)| TargetScore { log1p_mean: m / total as f64, log_score: s.value() })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reducer {
    Sum,
    Mean,
}

/// Applies `reducer` over the cells chosen by `selector(i, h, x)` in every draw.
pub fn aggregate_functional<F>(fs: &ForecastSet, selector: F, reducer: Reducer) -> Result<Vec<f64>>
where
    F: Fn(usize, usize, usize) -> bool,
{
    let mut cells = Vec::new();
    for i in 0..fs.n {
        for &h in &fs.horizons {
            for x in 0..fs.a {
                if selector(i, h, x) {
                    cells.push(fs.cell(i, h, x));
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::InvalidArgument("selector matches no forecast cells".into()));
    }
    let k = cells.len() as f64;
    Ok(fs
        .count_draws
        .iter()
        .map(|d| {
            let s: f64 = cells.iter().map(|&c| d[c] as f64).sum();
            match reducer {
                Reducer::Sum => s,
                Reducer::Mean => s / k,
            }
        })
        .collect())
}

fn summary(xs: &mut [f64]) -> [f64; 5] {
    let m = crate::stats::mean(xs);
    let sd = crate::stats::variance(xs).sqrt();
    xs.sort_by(f64::total_cmp);
    let q = |p| crate::stats::quantile_sorted(xs, p);
    [m, sd, q(0.05), q(0.5), q(0.95)]
}

/// Writes per-cell predictive summaries on the count and `log(1 + y)` scales.
pub fn write_forecast_summary<W: Write>(fs: &ForecastSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "population", "year", "horizon", "age", "mean", "sd", "q05", "q50", "q95", "log_mean", "log_sd", "log_q05",
        "log_q50", "log_q95",
    ])?;
    for i in 0..fs.n {
        for &h in &fs.horizons {
            for x in 0..fs.a {
                let mut counts = fs.cell_counts(i, h, x);
                let mut logs: Vec<f64> = counts.iter().map(|y| y.ln_1p()).collect();
                let mut rec = vec![
                    fs.population_labels[i].clone(),
                    (fs.origin_year + h as i64).to_string(),
                    h.to_string(),
                    fs.age_labels[x].clone(),
                ];
                rec.extend(summary(&mut counts).iter().map(|v| v.to_string()));
                rec.extend(summary(&mut logs).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Draw-level quantiles of an aggregate, for reporting.
pub fn aggregate_quantiles(draws: &[f64], probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|&p| quantile(draws, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::PriorSpec;
    use crate::sampler::ModelState;
    use crate::stats::{mean, variance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_factor_draw(last: f64, kappa: f64, tau: f64, sigma2: f64, lambda: f64) -> FactorDraw {
        FactorDraw {
            f_t: DMatrix::from_column_slice(2, 1, &[0.0, last]),
            f_a: DMatrix::from_element(1, 1, 1.0),
            lambda: vec![DMatrix::from_element(1, 1, lambda)],
            kappa: vec![kappa],
            tau_t: vec![tau],
            tau_a: vec![1.0],
            sigma2: vec![sigma2],
        }
    }

    /// Store of one draw on a 1×2×1 grid with the given factor draw swapped in.
    fn toy_store(draw: FactorDraw, offset: f64) -> (DrawStore, CountPanel) {
        let panel = CountPanel::from_counts((1, 2, 1), vec![1, 1], vec![offset; 2]).unwrap();
        let state = ModelState {
            z: vec![DMatrix::zeros(2, 1)],
            f_t: draw.f_t.clone(),
            f_a: draw.f_a.clone(),
            lambda: draw.lambda.clone(),
            kappa: draw.kappa.clone(),
            tau_t: vec![1.0],
            tau_a: vec![1.0],
            sigma2: vec![1.0],
        };
        let mut store = DrawStore::from_states(&panel, &PriorSpec::new(1, 1), &[state]).unwrap();
        store.factors = vec![draw];
        (store, panel)
    }

    #[test]
    fn deterministic_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = forecast_factors(&one_factor_draw(2.0, 0.0, 0.0, 1.0, 1.0), 4, &mut rng);
        assert!(f.iter().all(|v| *v == 2.0));
        let f = forecast_factors(&one_factor_draw(2.0, 0.25, 0.0, 1.0, 1.0), 4, &mut rng);
        for h in 0..4 {
            assert!((f[(h, 0)] - (2.0 + 0.25 * (h + 1) as f64)).abs() < 1e-15);
        }
    }

    #[test]
    fn factor_variance_grows_linearly() {
        let draw = one_factor_draw(0.0, 0.1, 0.3, 1.0, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<f64> = (0..100_000).map(|_| forecast_factors(&draw, 5, &mut rng)[(4, 0)]).collect();
        assert!((variance(&xs) / 1.5 - 1.0).abs() < 0.05);
        assert!((mean(&xs) - 0.5).abs() < 0.02);
    }

    #[test]
    fn zero_intensity_gives_poisson_one() {
        let (store, panel) = toy_store(one_factor_draw(0.0, 0.0, 0.0, 0.0, 0.0), 1.0);
        let opts = ForecastOptions { horizon: 2, replicates: 20_000, ..Default::default() };
        let fs = forecast_counts(&store, &panel, &opts).unwrap();
        assert_eq!(fs.n_draws(), 20_000);
        for h in 1..=2 {
            let ys = fs.cell_counts(0, h, 0);
            assert!((mean(&ys) - 1.0).abs() < 4.0 * (1.0f64 / 20_000.0).sqrt());
            assert!((variance(&ys) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn lognormal_mean_at_large_intensity() {
        // E[y] = O exp(m + s²/2) with m = 2, s² = σ² + hτ
        let (sigma2, tau, h) = (0.04, 0.01, 3);
        let (store, panel) = toy_store(one_factor_draw(2.0, 0.0, tau, sigma2, 1.0), 1e4);
        let opts = ForecastOptions { horizon: h, replicates: 10_000, ..Default::default() };
        let fs = forecast_counts(&store, &panel, &opts).unwrap();
        let oracle = 1e4 * (2.0 + 0.5 * (sigma2 + h as f64 * tau)).exp();
        let got = mean(&fs.cell_counts(0, h, 0));
        assert!((got / oracle - 1.0).abs() < 0.01, "{got} vs {oracle}");
    }

    #[test]
    fn idiosyncratic_toggle() {
        let (store, panel) = toy_store(one_factor_draw(1.0, 0.0, 0.0, 0.5, 1.0), 1.0);
        let opts = ForecastOptions { horizon: 1, replicates: 200, keep_latent: true, include_idiosyncratic: false, ..Default::default() };
        let fs = forecast_counts(&store, &panel, &opts).unwrap();
        assert!(fs.latent_draws.iter().all(|d| d[0] == 1.0));
        let on = forecast_counts(&store, &panel, &ForecastOptions { include_idiosyncratic: true, ..opts }).unwrap();
        assert!(variance(&on.latent_draws.iter().map(|d| d[0]).collect::<Vec<_>>()) > 0.3);
    }

    #[test]
    fn capped_cells_are_counted() {
        let (store, panel) = toy_store(one_factor_draw(40.0, 0.0, 0.0, 0.0, 1.0), 1.0);
        let fs = forecast_counts(&store, &panel, &ForecastOptions { horizon: 1, ..Default::default() }).unwrap();
        assert_eq!(fs.capped_cells, 1);
    }

    #[test]
    fn streaming_mean_matches_stored_draws() {
        let (store, panel) = toy_store(one_factor_draw(1.0, 0.1, 0.05, 0.1, 1.0), 3.0);
        let opts = ForecastOptions { horizon: 4, replicates: 300, ..Default::default() };
        let fs = forecast_counts(&store, &panel, &opts).unwrap();
        let means = forecast_log1p_mean(&store, &panel, &[1, 4], &opts).unwrap();
        for (k, h) in [1usize, 4].into_iter().enumerate() {
            let direct = mean(&fs.cell_counts(0, h, 0).iter().map(|y| y.ln_1p()).collect::<Vec<_>>());
            assert!((means[k][(0, 0)] - direct).abs() < 1e-12);
        }
        assert!(forecast_log1p_mean(&store, &panel, &[5], &opts).is_err());
    }

    #[test]
    fn scores_match_stored_latent_draws() {
        let (store, panel) = toy_store(one_factor_draw(0.5, 0.0, 0.02, 0.2, 1.0), 2.0);
        let opts = ForecastOptions { horizon: 3, replicates: 700, keep_latent: true, ..Default::default() };
        let fs = forecast_counts(&store, &panel, &opts).unwrap();
        let targets = [ForecastTarget { i: 0, h: 3, x: 0, y: 4 }, ForecastTarget { i: 0, h: 1, x: 0, y: 0 }];
        let got = forecast_scores(&store, &panel, &targets, &opts).unwrap();
        for (g, sc) in targets.iter().zip(&got) {
            let c = fs.cell(g.i, g.h, g.x);
            let lls: Vec<f64> = fs.latent_draws.iter().map(|z| poisson_loglik_cell(g.y, 2.0, z[c])).collect();
            let want = crate::stats::log_sum_exp(&lls) - (lls.len() as f64).ln();
            assert!((sc.log_score - want).abs() < 1e-10);
            let direct = mean(&fs.cell_counts(g.i, g.h, g.x).iter().map(|y| y.ln_1p()).collect::<Vec<_>>());
            assert!((sc.log1p_mean - direct).abs() < 1e-12);
        }
        assert!(forecast_scores(&store, &panel, &[ForecastTarget { i: 0, h: 4, x: 0, y: 0 }], &opts).is_err());
    }

    #[test]
    fn aggregates() {
        let (store, panel) = toy_store(one_factor_draw(1.0, 0.0, 0.1, 0.1, 1.0), 5.0);
        let fs = forecast_counts(&store, &panel, &ForecastOptions { horizon: 3, replicates: 50, ..Default::default() }).unwrap();
        let single = aggregate_functional(&fs, |_, h, _| h == 2, Reducer::Sum).unwrap();
        assert_eq!(single, fs.cell_counts(0, 2, 0));
        let a = aggregate_functional(&fs, |_, h, _| h == 1, Reducer::Sum).unwrap();
        let b = aggregate_functional(&fs, |_, h, _| h >= 2, Reducer::Sum).unwrap();
        let all = aggregate_functional(&fs, |_, _, _| true, Reducer::Sum).unwrap();
        for k in 0..all.len() {
            assert_eq!(a[k] + b[k], all[k]);
        }
        let m = aggregate_functional(&fs, |_, _, _| true, Reducer::Mean).unwrap();
        assert!((m[0] * 3.0 - all[0]).abs() < 1e-12);
        assert!(aggregate_functional(&fs, |_, _, _| false, Reducer::Sum).is_err());
    }

    #[test]
    fn summary_csv_shape() {
        let (store, panel) = toy_store(one_factor_draw(1.0, 0.0, 0.1, 0.1, 1.0), 5.0);
        let fs = forecast_counts(&store, &panel, &ForecastOptions { horizon: 2, replicates: 10, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        write_forecast_summary(&fs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("p1,3,1,0,"));
    }

    #[test]
    fn missing_factor_draws_rejected() {
        let (mut store, panel) = toy_store(one_factor_draw(1.0, 0.0, 0.1, 0.1, 1.0), 5.0);
        store.factors.clear();
        assert!(forecast_counts(&store, &panel, &ForecastOptions::default()).is_err());
    }
}
