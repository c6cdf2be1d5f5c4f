//! Retained posterior draws and their on-disk layout.
//!
//! A store directory holds `manifest.txt` (flat key=value) plus one CSV per
//! block. Numbers are written in shortest round-trip form, so reading a
//! directory back reproduces the draws exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::config::KeyValues;
use crate::data::CountPanel;
use crate::error::{invalid, Error, Result};
use crate::priors::PriorSpec;
use crate::stats::{quantile, RunningMoments};

use super::chain::{cell_moments, ChainStatus, Diagnostics, SamplerConfig};
use super::latent::LatentData;
use super::state::{Dims, FactorDraw, ModelState};

const FORMAT_VERSION: u32 = 1;

/// Thinned draws of one chain plus streaming cell summaries.
///
/// Cell-indexed vectors (`fitted`, `predictive`, `acceptance`) use panel
/// order `(i, t, x)` with `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawStore {
    pub dims: Dims,
    pub prior: PriorSpec,
    pub config: SamplerConfig,
    pub status: ChainStatus,
    pub diagnostics: Diagnostics,
    pub sigma2: Vec<Vec<f64>>,
    pub tau_t: Vec<Vec<f64>>,
    pub tau_a: Vec<Vec<f64>>,
    pub kappa: Vec<Vec<f64>>,
    pub loglik: Vec<f64>,
    /// Empty unless the config asked for factor retention.
    pub factors: Vec<FactorDraw>,
    /// Running moments of the fitted mean `F_TΛ_iF_A'`.
    pub fitted: Vec<RunningMoments>,
    /// Running moments of `log(1 + y_rep)`; empty accumulators when not tracked.
    pub predictive: Vec<RunningMoments>,
    /// Post-adaptation Metropolis acceptance rate; `None` for masked cells.
    pub acceptance: Vec<Option<f64>>,
    /// Free-form provenance entries written to the manifest (input digests and so on).
    pub provenance: BTreeMap<String, String>,
}

impl DrawStore {
    pub(crate) fn empty(dims: Dims, prior: PriorSpec, config: SamplerConfig) -> Self {
        Self {
            dims,
            prior,
            config,
            status: ChainStatus::Completed,
            diagnostics: Diagnostics::default(),
            sigma2: Vec::new(),
            tau_t: Vec::new(),
            tau_a: Vec::new(),
            kappa: Vec::new(),
            loglik: Vec::new(),
            factors: Vec::new(),
            fitted: cell_moments(dims),
            predictive: cell_moments(dims),
            acceptance: vec![None; dims.n * dims.t * dims.a],
            provenance: BTreeMap::new(),
        }
    }

    /// Builds a store whose draws are exactly `states`, with log-likelihoods
    /// evaluated against `panel`.
    pub fn from_states(panel: &CountPanel, prior: &PriorSpec, states: &[ModelState]) -> Result<Self> {
        let first = states.first().ok_or_else(|| Error::InvalidArgument("no states given".into()))?;
        let dims = first.dims();
        if panel.dims() != (dims.n, dims.t, dims.a) {
            return invalid("states do not match the panel dimensions");
        }
        let config = SamplerConfig {
            n_iterations: states.len(),
            n_burnin: 0,
            thin: 1,
            ..SamplerConfig::default()
        };
        let data = LatentData::new(panel);
        let mut store = Self::empty(dims, prior.clone(), config);
        for s in states {
            s.validate()?;
            if s.dims() != dims {
                return invalid("states have inconsistent dimensions");
            }
            let ll = (0..dims.n).map(|i| data.loglik(i, &s.z[i])).sum();
            store.record(s, ll);
        }
        Ok(store)
    }

    pub(crate) fn record(&mut self, state: &ModelState, loglik: f64) {
        self.sigma2.push(state.sigma2.clone());
        self.tau_t.push(state.tau_t.clone());
        self.tau_a.push(state.tau_a.clone());
        self.kappa.push(state.kappa.clone());
        self.loglik.push(loglik);
        if self.config.retain_factors {
            self.factors.push(state.to_factor_draw());
        }
        let (t, a) = (self.dims.t, self.dims.a);
        for i in 0..self.dims.n {
            let m = state.fitted_mean(i);
            for tt in 0..t {
                for x in 0..a {
                    self.fitted[(i * t + tt) * a + x].push(m[(tt, x)]);
                }
            }
        }
    }

    pub fn n_draws(&self) -> usize {
        self.sigma2.len()
    }

    fn cell(&self, i: usize, t: usize, x: usize) -> usize {
        (i * self.dims.t + t) * self.dims.a + x
    }

    /// Posterior mean of `F_TΛ_iF_A'` as a `T×A` matrix.
    pub fn fitted_mean_matrix(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.dims.t, self.dims.a, |t, x| self.fitted[self.cell(i, t, x)].mean())
    }

    /// Posterior predictive mean of `log(1 + y)` as a `T×A` matrix.
    pub fn predictive_mean_matrix(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.dims.t, self.dims.a, |t, x| self.predictive[self.cell(i, t, x)].mean())
    }

    /// Draws of `σ²_i` across the chain.
    pub fn sigma2_trace(&self, i: usize) -> Vec<f64> {
        self.sigma2.iter().map(|d| d[i]).collect()
    }

    /// `(mean rate, share of observed cells with rate in [lo, hi])`.
    pub fn acceptance_summary(&self, lo: f64, hi: f64) -> Option<(f64, f64)> {
        let rates: Vec<f64> = self.acceptance.iter().flatten().copied().collect();
        if rates.is_empty() {
            return None;
        }
        let inside = rates.iter().filter(|r| (lo..=hi).contains(*r)).count();
        Some((rates.iter().sum::<f64>() / rates.len() as f64, inside as f64 / rates.len() as f64))
    }

    // ---------------------------------------------------------------------
    // serialization

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let d = self.dims;
        let mut kv = KeyValues::new();
        kv.set("format_version", FORMAT_VERSION);
        kv.set("kind", "draws");
        write_dims(&mut kv, d);
        kv.set("n_draws", self.n_draws());
        match &self.status {
            ChainStatus::Completed => kv.set("status", "completed"),
            ChainStatus::Aborted { iteration, reason } => {
                kv.set("status", "aborted");
                kv.set("abort_iteration", iteration);
                kv.set("abort_reason", reason.replace('\n', " "));
            }
        }
        kv.set("diag.nonfinite_rejections", self.diagnostics.nonfinite_rejections);
        kv.set("diag.tau_floored", self.diagnostics.tau_floored);
        kv.set("diag.ridge_applied", self.diagnostics.ridge_applied);
        prefixed(&mut kv, "sampler.", &self.config.to_key_values());
        prefixed(&mut kv, "prior.", &self.prior.to_key_values());
        for (k, v) in &self.provenance {
            kv.set(&format!("input.{k}"), v);
        }
        fs::write(dir.join("manifest.txt"), kv.to_text())?;

        write_vectors(&dir.join("sigma2.csv"), "sigma2", &self.sigma2, d.n)?;
        write_vectors(&dir.join("tau_t.csv"), "tau_t", &self.tau_t, d.q)?;
        write_vectors(&dir.join("tau_a.csv"), "tau_a", &self.tau_a, d.r)?;
        write_vectors(&dir.join("kappa.csv"), "kappa", &self.kappa, d.q)?;
        let ll: Vec<Vec<f64>> = self.loglik.iter().map(|v| vec![*v]).collect();
        write_vectors(&dir.join("loglik.csv"), "loglik", &ll, 1)?;
        if self.config.retain_factors {
            write_factor_draws(dir, &self.factors, d)?;
        }
        write_moments(&dir.join("fitted.csv"), &self.fitted, d)?;
        if self.config.track_predictive {
            write_moments(&dir.join("predictive.csv"), &self.predictive, d)?;
        }
        let mut w = csv::Writer::from_path(dir.join("acceptance.csv"))?;
        w.write_record(["population", "t", "x", "rate"])?;
        for (k, rate) in self.acceptance.iter().enumerate() {
            let (i, t, x) = split_cell(k, d);
            let r = rate.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([i.to_string(), t.to_string(), x.to_string(), r])?;
        }
        w.flush()?;
        self.write_summary(&dir.join("summary.csv"))
    }

    /// Posterior summaries of the identified functionals: `σ²_i`, the
    /// log-likelihood, and per-population averages of the fitted surface.
    fn write_summary(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["quantity", "index", "mean", "sd", "q025", "q50", "q975"])?;
        let mut row = |name: &str, idx: usize, xs: &[f64]| -> Result<()> {
            let (m, sd, a, b, c) = if xs.is_empty() {
                (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
            } else {
                (
                    crate::stats::mean(xs),
                    crate::stats::variance(xs).sqrt(),
                    quantile(xs, 0.025),
                    quantile(xs, 0.5),
                    quantile(xs, 0.975),
                )
            };
            w.write_record([name.to_string(), idx.to_string(), fmt(m), fmt(sd), fmt(a), fmt(b), fmt(c)])?;
            Ok(())
        };
        for i in 0..self.dims.n {
            row("sigma2", i, &self.sigma2_trace(i))?;
        }
        row("loglik", 0, &self.loglik)?;
        for i in 0..self.dims.n {
            let cells = self.dims.t * self.dims.a;
            let means: Vec<f64> = self.fitted[i * cells..(i + 1) * cells].iter().map(|m| m.mean()).collect();
            let avg = crate::stats::mean(&means);
            w.write_record(["fitted_mean_avg".to_string(), i.to_string(), fmt(avg), String::new(), String::new(), String::new(), String::new()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let kv = KeyValues::parse(&fs::read_to_string(dir.join("manifest.txt"))?)?;
        if kv.get_str("kind") != Some("draws") {
            return Err(Error::Parse(format!("{} is not a draw store", dir.display())));
        }
        let d = read_dims(&kv)?;
        let config = SamplerConfig::from_key_values(&unprefixed(&kv, "sampler."))?;
        let prior = PriorSpec::from_key_values(&unprefixed(&kv, "prior."))?;
        let n_draws: usize = required(&kv, "n_draws")?;
        let status = match kv.get_str("status") {
            Some("completed") => ChainStatus::Completed,
            Some("aborted") => ChainStatus::Aborted {
                iteration: required(&kv, "abort_iteration")?,
                reason: kv.get_str("abort_reason").unwrap_or_default().to_string(),
            },
            other => return Err(Error::Parse(format!("bad status {other:?}"))),
        };
        let diagnostics = Diagnostics {
            nonfinite_rejections: kv.get_or("diag.nonfinite_rejections", 0)?,
            tau_floored: kv.get_or("diag.tau_floored", 0)?,
            ridge_applied: kv.get_or("diag.ridge_applied", 0)?,
        };
        let provenance = kv
            .keys()
            .filter_map(|k| k.strip_prefix("input.").map(|s| (s.to_string(), kv.get_str(k).unwrap().to_string())))
            .collect();
        let mut store = Self::empty(d, prior, config);
        store.status = status;
        store.diagnostics = diagnostics;
        store.provenance = provenance;
        store.sigma2 = read_vectors(&dir.join("sigma2.csv"), n_draws, d.n)?;
        store.tau_t = read_vectors(&dir.join("tau_t.csv"), n_draws, d.q)?;
        store.tau_a = read_vectors(&dir.join("tau_a.csv"), n_draws, d.r)?;
        store.kappa = read_vectors(&dir.join("kappa.csv"), n_draws, d.q)?;
        store.loglik = read_vectors(&dir.join("loglik.csv"), n_draws, 1)?.into_iter().map(|v| v[0]).collect();
        if store.config.retain_factors {
            let states = read_factor_draws(dir, n_draws, d)?;
            store.factors = states;
            for (k, f) in store.factors.iter_mut().enumerate() {
                f.kappa = store.kappa[k].clone();
                f.tau_t = store.tau_t[k].clone();
                f.tau_a = store.tau_a[k].clone();
                f.sigma2 = store.sigma2[k].clone();
            }
        }
        store.fitted = read_moments(&dir.join("fitted.csv"), d)?;
        if store.config.track_predictive {
            store.predictive = read_moments(&dir.join("predictive.csv"), d)?;
        }
        let rows = read_rows(&dir.join("acceptance.csv"))?;
        if rows.len() != store.acceptance.len() {
            return Err(Error::Parse("acceptance.csv has the wrong number of rows".into()));
        }
        for (k, r) in rows.iter().enumerate() {
            store.acceptance[k] = if r[3].is_empty() { None } else { Some(num(&r[3])?) };
        }
        Ok(store)
    }
}

/// Writes one parameter configuration (including `Z`) to `dir`.
pub fn write_state_dir(dir: &Path, state: &ModelState) -> Result<()> {
    state.validate()?;
    fs::create_dir_all(dir)?;
    let d = state.dims();
    let mut kv = KeyValues::new();
    kv.set("format_version", FORMAT_VERSION);
    kv.set("kind", "state");
    write_dims(&mut kv, d);
    fs::write(dir.join("manifest.txt"), kv.to_text())?;
    write_vectors(&dir.join("sigma2.csv"), "sigma2", &[state.sigma2.clone()], d.n)?;
    write_vectors(&dir.join("tau_t.csv"), "tau_t", &[state.tau_t.clone()], d.q)?;
    write_vectors(&dir.join("tau_a.csv"), "tau_a", &[state.tau_a.clone()], d.r)?;
    write_vectors(&dir.join("kappa.csv"), "kappa", &[state.kappa.clone()], d.q)?;
    write_factor_draws(dir, &[state.to_factor_draw()], d)?;
    let mut w = csv::Writer::from_path(dir.join("z.csv"))?;
    w.write_record(["population", "t", "x", "z"])?;
    for (i, z) in state.z.iter().enumerate() {
        for t in 0..d.t {
            for x in 0..d.a {
                w.write_record([i.to_string(), t.to_string(), x.to_string(), fmt(z[(t, x)])])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_state_dir(dir: &Path) -> Result<ModelState> {
    let kv = KeyValues::parse(&fs::read_to_string(dir.join("manifest.txt"))?)?;
    if kv.get_str("kind") != Some("state") {
        return Err(Error::Parse(format!("{} is not a state directory", dir.display())));
    }
    let d = read_dims(&kv)?;
    let f = read_factor_draws(dir, 1, d)?.pop().expect("one draw");
    let rows = read_rows(&dir.join("z.csv"))?;
    if rows.len() != d.n * d.t * d.a {
        return Err(Error::Parse("z.csv has the wrong number of rows".into()));
    }
    let mut z = vec![DMatrix::zeros(d.t, d.a); d.n];
    for (k, r) in rows.iter().enumerate() {
        let (i, t, x) = split_cell(k, d);
        z[i][(t, x)] = num(&r[3])?;
    }
    let one = |name: &str, len: usize| -> Result<Vec<f64>> {
        Ok(read_vectors(&dir.join(name), 1, len)?.remove(0))
    };
    let state = ModelState {
        z,
        f_t: f.f_t,
        f_a: f.f_a,
        lambda: f.lambda,
        kappa: one("kappa.csv", d.q)?,
        tau_t: one("tau_t.csv", d.q)?,
        tau_a: one("tau_a.csv", d.r)?,
        sigma2: one("sigma2.csv", d.n)?,
    };
    state.validate()?;
    Ok(state)
}

// -------------------------------------------------------------------------
// helpers

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn num(s: &str) -> Result<f64> {
    if s.is_empty() {
        return Ok(f64::NAN);
    }
    s.parse().map_err(|_| Error::Parse(format!("not a number: `{s}`")))
}

fn required<T: std::str::FromStr>(kv: &KeyValues, key: &str) -> Result<T> {
    kv.get(key)?.ok_or_else(|| Error::Parse(format!("manifest lacks `{key}`")))
}

fn write_dims(kv: &mut KeyValues, d: Dims) {
    kv.set("n", d.n);
    kv.set("t", d.t);
    kv.set("a", d.a);
    kv.set("q", d.q);
    kv.set("r", d.r);
}

fn read_dims(kv: &KeyValues) -> Result<Dims> {
    Ok(Dims {
        n: required(kv, "n")?,
        t: required(kv, "t")?,
        a: required(kv, "a")?,
        q: required(kv, "q")?,
        r: required(kv, "r")?,
    })
}

fn prefixed(into: &mut KeyValues, prefix: &str, from: &KeyValues) {
    for k in from.keys() {
        into.set(&format!("{prefix}{k}"), from.get_str(k).unwrap());
    }
}

fn unprefixed(kv: &KeyValues, prefix: &str) -> KeyValues {
    let mut out = KeyValues::new();
    for k in kv.keys() {
        if let Some(s) = k.strip_prefix(prefix) {
            out.set(s, kv.get_str(k).unwrap());
        }
    }
    out
}

fn split_cell(k: usize, d: Dims) -> (usize, usize, usize) {
    let cells = d.t * d.a;
    (k / cells, (k % cells) / d.a, k % d.a)
}

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        out.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(out)
}

fn write_vectors(path: &Path, name: &str, rows: &[Vec<f64>], width: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["draw".to_string()];
    header.extend((0..width).map(|k| if width == 1 { name.to_string() } else { format!("{name}_{k}") }));
    w.write_record(&header)?;
    for (k, row) in rows.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(|v| fmt(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_vectors(path: &Path, n_rows: usize, width: usize) -> Result<Vec<Vec<f64>>> {
    let rows = read_rows(path)?;
    if rows.len() != n_rows || rows.iter().any(|r| r.len() != width + 1) {
        return Err(Error::Parse(format!("{} does not hold {n_rows}×{width} values", path.display())));
    }
    rows.iter().map(|r| r[1..].iter().map(|s| num(s)).collect()).collect()
}

fn write_factor_draws(dir: &Path, draws: &[FactorDraw], d: Dims) -> Result<()> {
    let mut ft = csv::Writer::from_path(dir.join("f_t.csv"))?;
    let mut header = vec!["draw".to_string(), "t".to_string()];
    header.extend((0..d.q).map(|q| format!("f_{q}")));
    ft.write_record(&header)?;
    let mut fa = csv::Writer::from_path(dir.join("f_a.csv"))?;
    let mut header = vec!["draw".to_string(), "x".to_string()];
    header.extend((0..d.r).map(|r| format!("f_{r}")));
    fa.write_record(&header)?;
    let mut lw = csv::Writer::from_path(dir.join("lambda.csv"))?;
    let mut header = vec!["draw".to_string(), "population".to_string(), "q".to_string()];
    header.extend((0..d.r).map(|r| format!("r_{r}")));
    lw.write_record(&header)?;
    for (k, f) in draws.iter().enumerate() {
        for t in 0..d.t {
            let mut rec = vec![k.to_string(), t.to_string()];
            rec.extend(f.f_t.row(t).iter().map(|v| fmt(*v)));
            ft.write_record(&rec)?;
        }
        for x in 0..d.a {
            let mut rec = vec![k.to_string(), x.to_string()];
            rec.extend(f.f_a.row(x).iter().map(|v| fmt(*v)));
            fa.write_record(&rec)?;
        }
        for (i, l) in f.lambda.iter().enumerate() {
            for q in 0..d.q {
                let mut rec = vec![k.to_string(), i.to_string(), q.to_string()];
                rec.extend(l.row(q).iter().map(|v| fmt(*v)));
                lw.write_record(&rec)?;
            }
        }
    }
    ft.flush()?;
    fa.flush()?;
    lw.flush()?;
    Ok(())
}

/// Reads factor and loading draws; the scalar blocks are filled in by the caller.
fn read_factor_draws(dir: &Path, n_draws: usize, d: Dims) -> Result<Vec<FactorDraw>> {
    let table = |name: &str, rows_per: usize, lead: usize, width: usize| -> Result<Vec<f64>> {
        let rows = read_rows(&dir.join(name))?;
        if rows.len() != n_draws * rows_per || rows.iter().any(|r| r.len() != lead + width) {
            return Err(Error::Parse(format!("{name} has an unexpected shape")));
        }
        rows.iter().flat_map(|r| r[lead..].iter().map(|s| num(s))).collect()
    };
    let ft = table("f_t.csv", d.t, 2, d.q)?;
    let fa = table("f_a.csv", d.a, 2, d.r)?;
    let lam = table("lambda.csv", d.n * d.q, 3, d.r)?;
    Ok((0..n_draws)
        .map(|k| FactorDraw {
            f_t: DMatrix::from_row_slice(d.t, d.q, &ft[k * d.t * d.q..(k + 1) * d.t * d.q]),
            f_a: DMatrix::from_row_slice(d.a, d.r, &fa[k * d.a * d.r..(k + 1) * d.a * d.r]),
            lambda: (0..d.n)
                .map(|i| {
                    let off = (k * d.n + i) * d.q * d.r;
                    DMatrix::from_row_slice(d.q, d.r, &lam[off..off + d.q * d.r])
                })
                .collect(),
            kappa: vec![0.0; d.q],
            tau_t: vec![1.0; d.q],
            tau_a: vec![1.0; d.r],
            sigma2: vec![1.0; d.n],
        })
        .collect())
}

fn write_moments(path: &Path, moments: &[RunningMoments], d: Dims) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["population", "t", "x", "n", "mean", "var"])?;
    for (k, m) in moments.iter().enumerate() {
        let (i, t, x) = split_cell(k, d);
        w.write_record([
            i.to_string(),
            t.to_string(),
            x.to_string(),
            m.count().to_string(),
            fmt(m.mean()),
            fmt(m.variance()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn read_moments(path: &Path, d: Dims) -> Result<Vec<RunningMoments>> {
    let rows = read_rows(path)?;
    if rows.len() != d.n * d.t * d.a {
        return Err(Error::Parse(format!("{} has the wrong number of rows", path.display())));
    }
    rows.iter()
        .map(|r| {
            let n: u64 = r[3].parse().map_err(|_| Error::Parse("bad draw count".into()))?;
            Ok(RunningMoments::from_parts(n, num(&r[4])?, num(&r[5])?))
        })
        .collect()
}
