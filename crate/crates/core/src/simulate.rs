//! Synthetic panels drawn from the model, and recovery summaries comparing a
//! fit against the generating parameters.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{join, KeyValues};
use crate::data::CountPanel;
use crate::error::{invalid, Result};
use crate::hosvd::{center_fitted_array, component_abs_correlations, hosvd_modes};
use crate::rng::{stream, Tag};
use crate::sampler::{DrawStore, ModelState};
use crate::stats::{correlation, quantile, sample_inverse_gamma, sample_poisson};

/// Generator settings. The defaults are the reference design: 50 populations,
/// 30 years, 40 ages, three time and three age factors, offsets of 10.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub t: usize,
    pub a: usize,
    pub q: usize,
    pub r: usize,
    pub tau_t: Vec<f64>,
    pub tau_a: Vec<f64>,
    pub kappa: Vec<f64>,
    /// Inverse-gamma `(shape, scale)` for the noise variances.
    pub sigma2_prior: (f64, f64),
    pub offset: f64,
    /// Standard deviation of the loadings (1 in the reference design).
    pub loading_sd: f64,
    /// Skip the idiosyncratic noise so that `Z = F_TΛF_A'` (the `σ² → 0` limit).
    /// The truth still reports the drawn `σ²`.
    pub noise_free: bool,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 50,
            t: 30,
            a: 40,
            q: 3,
            r: 3,
            tau_t: vec![0.01, 0.02, 0.03],
            tau_a: vec![0.01, 0.02, 0.03],
            kappa: vec![-0.05, 0.05, 0.0],
            sigma2_prior: (10.0, 1.0),
            offset: 10.0,
            loading_sd: 1.0,
            noise_free: false,
            seed: 1,
        }
    }
}

const SIM_KEYS: [&str; 14] = [
    "n", "t", "a", "q", "r", "tau_t", "tau_a", "kappa", "sigma2_shape", "sigma2_scale", "offset", "loading_sd",
    "noise_free", "seed",
];

impl SimConfig {
    /// The reduced design used for quick end-to-end checks.
    pub fn reduced() -> Self {
        Self {
            n: 10,
            t: 15,
            a: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t < 2 || self.a < 2 || self.q == 0 || self.r == 0 {
            return invalid("need N ≥ 1, T ≥ 2, A ≥ 2 and at least one factor per margin");
        }
        if self.tau_t.len() != self.q || self.kappa.len() != self.q || self.tau_a.len() != self.r {
            return invalid("tau_t and kappa need Q entries, tau_a needs R entries");
        }
        if self.tau_t.iter().chain(&self.tau_a).any(|v| !(*v >= 0.0)) {
            return invalid("smoothing variances must be non-negative");
        }
        let (shape, scale) = self.sigma2_prior;
        if !(shape > 1.0 && scale > 0.0) {
            return invalid("noise-variance prior needs shape > 1 and scale > 0");
        }
        if !(self.offset > 0.0) || !(self.loading_sd >= 0.0) {
            return invalid("offset must be positive and loading_sd non-negative");
        }
        Ok(())
    }

    /// Reads overrides on top of the defaults.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(&SIM_KEYS)?;
        let d = Self::default();
        let cfg = Self {
            n: kv.get_or("n", d.n)?,
            t: kv.get_or("t", d.t)?,
            a: kv.get_or("a", d.a)?,
            q: kv.get_or("q", d.q)?,
            r: kv.get_or("r", d.r)?,
            tau_t: kv.get_list("tau_t")?.unwrap_or(d.tau_t),
            tau_a: kv.get_list("tau_a")?.unwrap_or(d.tau_a),
            kappa: kv.get_list("kappa")?.unwrap_or(d.kappa),
            sigma2_prior: (kv.get_or("sigma2_shape", d.sigma2_prior.0)?, kv.get_or("sigma2_scale", d.sigma2_prior.1)?),
            offset: kv.get_or("offset", d.offset)?,
            loading_sd: kv.get_or("loading_sd", d.loading_sd)?,
            noise_free: kv.get_or("noise_free", d.noise_free)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("n", self.n);
        kv.set("t", self.t);
        kv.set("a", self.a);
        kv.set("q", self.q);
        kv.set("r", self.r);
        kv.set("tau_t", join(&self.tau_t));
        kv.set("tau_a", join(&self.tau_a));
        kv.set("kappa", join(&self.kappa));
        kv.set("sigma2_shape", self.sigma2_prior.0);
        kv.set("sigma2_scale", self.sigma2_prior.1);
        kv.set("offset", self.offset);
        kv.set("loading_sd", self.loading_sd);
        kv.set("noise_free", self.noise_free);
        kv.set("seed", self.seed);
        kv
    }
}

/// Random walk of length `len` whose first value is itself a `N(0, τ)` draw.
fn random_walk<R: Rng + ?Sized>(len: usize, tau: f64, drift: f64, rng: &mut R) -> Vec<f64> {
    let sd = tau.sqrt();
    let mut out = Vec::with_capacity(len);
    let mut f = sd * rng.sample::<f64, _>(StandardNormal);
    out.push(f);
    for _ in 1..len {
        f += drift + sd * rng.sample::<f64, _>(StandardNormal);
        out.push(f);
    }
    out
}

/// Draws a panel and the parameters that generated it.
pub fn simulate_panel(cfg: &SimConfig) -> Result<(CountPanel, ModelState)> {
    cfg.validate()?;
    let (n, t, a, q, r) = (cfg.n, cfg.t, cfg.a, cfg.q, cfg.r);
    let mut rng = stream(cfg.seed, 0, Tag::Simulate, 0);
    let mut f_t = DMatrix::zeros(t, q);
    for k in 0..q {
        let path = random_walk(t, cfg.tau_t[k], cfg.kappa[k], &mut rng);
        f_t.set_column(k, &nalgebra::DVector::from_vec(path));
    }
    let mut f_a = DMatrix::zeros(a, r);
    for k in 0..r {
        let path = random_walk(a, cfg.tau_a[k], 0.0, &mut rng);
        f_a.set_column(k, &nalgebra::DVector::from_vec(path));
    }
    let lambda: Vec<DMatrix<f64>> = (0..n)
        .map(|_| DMatrix::from_fn(q, r, |_, _| cfg.loading_sd * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    let (shape, scale) = cfg.sigma2_prior;
    let sigma2: Vec<f64> = (0..n).map(|_| sample_inverse_gamma(shape, scale, &mut rng)).collect();

    let mut z = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n * t * a);
    for i in 0..n {
        let mut pr = stream(cfg.seed, 1, Tag::Simulate, i as u64);
        let mean = &f_t * &lambda[i] * f_a.transpose();
        let sd = if cfg.noise_free { 0.0 } else { sigma2[i].sqrt() };
        let zi = mean.map(|m| m + sd * pr.sample::<f64, _>(StandardNormal));
        for tt in 0..t {
            for x in 0..a {
                counts.push(sample_poisson(cfg.offset * zi[(tt, x)].exp(), &mut pr));
            }
        }
        z.push(zi);
    }
    let truth = ModelState {
        z,
        f_t,
        f_a,
        lambda,
        kappa: cfg.kappa.clone(),
        tau_t: cfg.tau_t.iter().map(|v| v.max(f64::MIN_POSITIVE)).collect(),
        tau_a: cfg.tau_a.iter().map(|v| v.max(f64::MIN_POSITIVE)).collect(),
        sigma2,
    };
    let panel = CountPanel::from_counts((n, t, a), counts, vec![cfg.offset; n * t * a])?;
    Ok((panel, truth))
}

/// Comparison of a fit with the generating parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    /// Pooled correlation between posterior-mean fitted surfaces and `F_TΛ_iF_A'`.
    pub fitted_correlation: f64,
    /// Per population: (true σ², posterior mean, 2.5% and 97.5% quantiles, covered).
    pub sigma2: Vec<(f64, f64, f64, f64, bool)>,
    /// Pooled correlation between predictive means and observed `log(1 + y)`;
    /// `None` when the store did not track the predictive.
    pub predictive_correlation: Option<f64>,
    /// `|corr|` between HOSVD components of the true and fitted surfaces.
    pub time_factor_correlations: Vec<f64>,
    pub age_factor_correlations: Vec<f64>,
}

impl RecoveryReport {
    pub fn sigma2_covered(&self) -> usize {
        self.sigma2.iter().filter(|s| s.4).count()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["metric", "index", "value"])?;
        let mut put = |m: &str, k: usize, v: f64| w.write_record([m.to_string(), k.to_string(), v.to_string()]);
        put("fitted_correlation", 0, self.fitted_correlation)?;
        put("sigma2_covered", 0, self.sigma2_covered() as f64)?;
        put("sigma2_populations", 0, self.sigma2.len() as f64)?;
        if let Some(c) = self.predictive_correlation {
            put("predictive_correlation", 0, c)?;
        }
        for (k, c) in self.time_factor_correlations.iter().enumerate() {
            put("time_factor_abs_corr", k + 1, *c)?;
        }
        for (k, c) in self.age_factor_correlations.iter().enumerate() {
            put("age_factor_abs_corr", k + 1, *c)?;
        }
        for (i, s) in self.sigma2.iter().enumerate() {
            put("sigma2_true", i, s.0)?;
            put("sigma2_mean", i, s.1)?;
            put("sigma2_q025", i, s.2)?;
            put("sigma2_q975", i, s.3)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Summarizes how well `draws` (fitted to `panel`) recovers `truth`.
pub fn recovery_report(truth: &ModelState, draws: &DrawStore, panel: &CountPanel) -> Result<RecoveryReport> {
    let d = truth.dims();
    if (d.n, d.t, d.a) != (draws.dims.n, draws.dims.t, draws.dims.a) || panel.dims() != (d.n, d.t, d.a) {
        return invalid("truth, draws and panel dimensions differ");
    }
    if draws.n_draws() == 0 {
        return invalid("the store holds no draws");
    }
    let true_mean: Vec<DMatrix<f64>> = (0..d.n).map(|i| truth.fitted_mean(i)).collect();
    let fit_mean: Vec<DMatrix<f64>> = (0..d.n).map(|i| draws.fitted_mean_matrix(i)).collect();
    let pool = |ms: &[DMatrix<f64>]| ms.iter().flat_map(|m| m.iter().copied()).collect::<Vec<f64>>();
    let fitted_correlation = correlation(&pool(&true_mean), &pool(&fit_mean)).unwrap_or(f64::NAN);

    let sigma2 = (0..d.n)
        .map(|i| {
            let tr = draws.sigma2_trace(i);
            let (lo, hi) = (quantile(&tr, 0.025), quantile(&tr, 0.975));
            let s = truth.sigma2[i];
            (s, crate::stats::mean(&tr), lo, hi, lo <= s && s <= hi)
        })
        .collect();

    let predictive_correlation = draws.config.track_predictive.then(|| {
        let (mut obs, mut pred) = (Vec::new(), Vec::new());
        for i in 0..d.n {
            let pm = draws.predictive_mean_matrix(i);
            for t in 0..d.t {
                for x in 0..d.a {
                    if panel.is_observed(i, t, x) {
                        obs.push((panel.count(i, t, x) as f64).ln_1p());
                        pred.push(pm[(t, x)]);
                    }
                }
            }
        }
        correlation(&obs, &pred).unwrap_or(f64::NAN)
    });

    let (tc, _) = center_fitted_array(&true_mean);
    let (fc, _) = center_fitted_array(&fit_mean);
    let (q, r) = (d.q.min(d.t), d.r.min(d.a));
    let tm = hosvd_modes(&tc, q, r)?;
    let fm = hosvd_modes(&fc, q, r)?;
    Ok(RecoveryReport {
        fitted_correlation,
        sigma2,
        predictive_correlation,
        time_factor_correlations: component_abs_correlations(&tm.time, &fm.time),
        age_factor_correlations: component_abs_correlations(&tm.age, &fm.age),
    })
}
