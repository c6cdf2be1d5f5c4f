//! Point metrics, log predictive scores, cell-wise cross-validation over the
//! factor grid and rolling-origin forecast evaluation.
//!
//! Every evaluation row keeps mergeable sufficient statistics, so pooled
//! metrics across folds, windows or saved reports are exact.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::benchmarks::{BenchmarkKind, BenchmarkSpec};
use crate::data::{to_log_panel, CountPanel};
use crate::error::{invalid, Error, Result};
use crate::forecast::{forecast_scores, ForecastOptions, ForecastTarget};
use crate::par;
use crate::priors::PriorSpec;
use crate::rng::{derive_seed, stream, Tag};
use crate::sampler::{poisson_loglik_cell, run_chain, run_chain_with_observer, ChainStatus, DrawStore, Init, SamplerConfig};
use crate::stats::{correlation, log_sum_exp, LogMeanExp};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// `None` when either side has zero variance or fewer than two cells.
    pub corr: Option<f64>,
    pub n: usize,
}

/// RMSE, MAE and Pearson correlation of `pred` against `truth`.
pub fn point_metrics(truth: &[f64], pred: &[f64]) -> Result<PointMetrics> {
    if truth.len() != pred.len() || truth.is_empty() {
        return invalid(format!("point metrics need equal non-empty lengths (got {} and {})", truth.len(), pred.len()));
    }
    let n = truth.len() as f64;
    let sse: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    let sae: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).abs()).sum();
    Ok(PointMetrics {
        rmse: (sse / n).sqrt(),
        mae: sae / n,
        corr: if truth.len() < 2 { None } else { correlation(truth, pred) },
        n: truth.len(),
    })
}

/// `log( mean_s p(y | O·exp(z_s)) )` for a Poisson count, via log-sum-exp.
pub fn log_predictive_score(y: u64, offset: f64, z_draws: &[f64]) -> Result<f64> {
    if z_draws.is_empty() {
        return invalid("log predictive score needs at least one draw");
    }
    let lls: Vec<f64> = z_draws.iter().map(|&z| poisson_loglik_cell(y, offset, z)).collect();
    let v = log_sum_exp(&lls) - (lls.len() as f64).ln();
    if v == f64::NEG_INFINITY {
        log::warn!("every draw gives zero likelihood to y = {y}; log predictive score is -inf");
    }
    Ok(v)
}

/// Mergeable sufficient statistics for RMSE, MAE, correlation and mean LPS.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricAccumulator {
    pub n: u64,
    pub sse: f64,
    pub sae: f64,
    pub mean_t: f64,
    pub mean_p: f64,
    pub m2_t: f64,
    pub m2_p: f64,
    pub c_tp: f64,
    pub n_lps: u64,
    pub lps_sum: f64,
}

impl MetricAccumulator {
    pub fn push(&mut self, truth: f64, pred: f64) {
        self.n += 1;
        let e = truth - pred;
        self.sse += e * e;
        self.sae += e.abs();
        let n = self.n as f64;
        let dt = truth - self.mean_t;
        self.mean_t += dt / n;
        let dp = pred - self.mean_p;
        self.mean_p += dp / n;
        self.m2_t += dt * (truth - self.mean_t);
        self.m2_p += dp * (pred - self.mean_p);
        self.c_tp += dt * (pred - self.mean_p);
    }

    pub fn push_lps(&mut self, lps: f64) {
        self.n_lps += 1;
        self.lps_sum += lps;
    }

    pub fn merge(&mut self, o: &MetricAccumulator) {
        if o.n > 0 {
            let (na, nb) = (self.n as f64, o.n as f64);
            let n = na + nb;
            let dt = o.mean_t - self.mean_t;
            let dp = o.mean_p - self.mean_p;
            let w = na * nb / n;
            self.mean_t += dt * nb / n;
            self.mean_p += dp * nb / n;
            self.m2_t += o.m2_t + dt * dt * w;
            self.m2_p += o.m2_p + dp * dp * w;
            self.c_tp += o.c_tp + dt * dp * w;
            self.n += o.n;
            self.sse += o.sse;
            self.sae += o.sae;
        }
        self.n_lps += o.n_lps;
        self.lps_sum += o.lps_sum;
    }

    pub fn metrics(&self) -> Option<PointMetrics> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        let corr = (self.n >= 2 && self.m2_t > 0.0 && self.m2_p > 0.0)
            .then(|| (self.c_tp / (self.m2_t.sqrt() * self.m2_p.sqrt())).clamp(-1.0, 1.0));
        Some(PointMetrics {
            rmse: (self.sse / n).sqrt(),
            mae: self.sae / n,
            corr,
            n: self.n as usize,
        })
    }

    /// Mean log predictive score per scored cell.
    pub fn lps(&self) -> Option<f64> {
        (self.n_lps > 0).then(|| self.lps_sum / self.n_lps as f64)
    }
}

/// Random partition of the observed cells into `k` folds of sizes differing
/// by at most one. Each mask marks the held-out cells of one fold.
pub fn cv_partition(panel: &CountPanel, k: usize, seed: u64) -> Result<Vec<Vec<bool>>> {
    if k < 2 {
        return invalid("cross-validation needs at least two folds");
    }
    let mut cells: Vec<usize> = (0..panel.mask().len()).filter(|&c| panel.mask()[c]).collect();
    if cells.len() < k {
        return invalid(format!("{} observed cells cannot fill {k} folds", cells.len()));
    }
    cells.shuffle(&mut stream(seed, 0, Tag::Partition, 0));
    let mut folds = vec![vec![false; panel.mask().len()]; k];
    for (pos, c) in cells.into_iter().enumerate() {
        folds[pos % k][c] = true;
    }
    Ok(folds)
}

/// A forecasting or fitting model evaluated by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Model {
    /// The Bayesian matrix factor model with `q` time and `r` age factors.
    Bayesian { q: usize, r: usize },
    Benchmark(BenchmarkSpec),
}

pub const BAYES_NAME: &str = "bmf";

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::Bayesian { .. } => BAYES_NAME,
            Model::Benchmark(b) => b.kind.name(),
        }
    }

    pub fn q(&self) -> Option<usize> {
        match self {
            Model::Bayesian { q, .. } => Some(*q),
            Model::Benchmark(b) => match b.kind {
                BenchmarkKind::TimeFactSep | BenchmarkKind::TimeFactJoint => Some(b.n_factors),
                _ => None,
            },
        }
    }

    pub fn r(&self) -> Option<usize> {
        match self {
            Model::Bayesian { r, .. } => Some(*r),
            Model::Benchmark(b) => match b.kind {
                BenchmarkKind::AgeFactSep | BenchmarkKind::AgeFactJoint => Some(b.n_factors),
                _ => None,
            },
        }
    }

    fn seed_key(&self) -> u64 {
        ((self.q().unwrap_or(0) as u64) << 32) | self.r().unwrap_or(0) as u64
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Model::Bayesian { q, r } => write!(f, "{BAYES_NAME}:{q}:{r}"),
            Model::Benchmark(b) if b.kind.uses_factors() => write!(f, "{}:{}", b.kind, b.n_factors),
            Model::Benchmark(b) => write!(f, "{}", b.kind),
        }
    }
}

/// Parses `bmf:Q:R`, `rw`, `rw_drift` or `<factorization>:K`.
impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| p.parse::<usize>().map_err(|_| Error::Parse(format!("bad factor count `{p}` in `{s}`")));
        match parts.as_slice() {
            [BAYES_NAME, q, r] => {
                let (q, r) = (num(q)?, num(r)?);
                if q == 0 || r == 0 {
                    return Err(Error::Parse(format!("`{s}`: factor counts must be positive")));
                }
                Ok(Model::Bayesian { q, r })
            }
            [kind] => {
                let kind: BenchmarkKind = kind.parse()?;
                if kind.uses_factors() {
                    return Err(Error::Parse(format!("`{s}` needs a factor count, e.g. `{kind}:3`")));
                }
                Ok(Model::Benchmark(BenchmarkSpec::new(kind, 0)?))
            }
            [kind, k] => Ok(Model::Benchmark(BenchmarkSpec::new(kind.parse()?, num(k)?)?)),
            _ => Err(Error::Parse(format!("unrecognized model `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowStatus {
    Ok,
    Failed(String),
}

/// Metrics of one model on one fold (cross-validation, `horizon = 0`) or one
/// window and horizon (forecasting).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub q: Option<usize>,
    pub r: Option<usize>,
    pub horizon: usize,
    pub split: usize,
    pub status: RowStatus,
    pub acc: MetricAccumulator,
    /// `(truth, prediction)` pairs on the `log(1 + y)` scale. Not serialized.
    pub predictions: Vec<(f64, f64)>,
}

impl EvalRow {
    fn new(model: &Model, horizon: usize, split: usize) -> Self {
        Self {
            model: model.name().to_string(),
            q: model.q(),
            r: model.r(),
            horizon,
            split,
            status: RowStatus::Ok,
            acc: MetricAccumulator::default(),
            predictions: Vec::new(),
        }
    }

    fn failed(model: &Model, horizon: usize, split: usize, reason: String) -> Self {
        log::warn!("{model} split {split} horizon {horizon} failed: {reason}");
        Self { status: RowStatus::Failed(reason), ..Self::new(model, horizon, split) }
    }

    fn record(&mut self, truth: f64, pred: f64) {
        self.acc.push(truth, pred);
        self.predictions.push((truth, pred));
    }

    pub fn is_ok(&self) -> bool {
        self.status == RowStatus::Ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    Rmse,
    Mae,
    Corr,
    Lps,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::Rmse, Criterion::Mae, Criterion::Corr, Criterion::Lps];

    pub fn higher_is_better(self) -> bool {
        matches!(self, Criterion::Corr | Criterion::Lps)
    }

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Rmse => "rmse",
            Criterion::Mae => "mae",
            Criterion::Corr => "corr",
            Criterion::Lps => "lps",
        }
    }

    fn of_acc(self, acc: &MetricAccumulator) -> Option<f64> {
        let m = acc.metrics()?;
        match self {
            Criterion::Rmse => Some(m.rmse),
            Criterion::Mae => Some(m.mae),
            Criterion::Corr => m.corr,
            Criterion::Lps => acc.lps(),
        }
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| Error::Parse(format!("unknown criterion `{s}`")))
    }
}

/// Pooled metrics of one `(model, Q, R, horizon)` group over its splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub model: String,
    pub q: Option<usize>,
    pub r: Option<usize>,
    pub horizon: usize,
    pub n_splits: usize,
    pub n_failed: usize,
    pub pooled: MetricAccumulator,
    /// Standard errors of the per-split criteria, indexed like [`Criterion::ALL`].
    pub se: [Option<f64>; 4],
}

impl SummaryRow {
    pub fn value(&self, c: Criterion) -> Option<f64> {
        c.of_acc(&self.pooled)
    }

    pub fn standard_error(&self, c: Criterion) -> Option<f64> {
        self.se[Criterion::ALL.iter().position(|&k| k == c).expect("listed")]
    }
}

type GroupKey = (String, Option<usize>, Option<usize>, usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

const CSV_HEADER: [&str; 21] = [
    "model", "q", "r", "horizon", "split", "status", "n", "rmse", "mae", "corr", "lps", "n_lps", "lps_sum", "sse", "sae",
    "mean_t", "mean_p", "m2_t", "m2_p", "c_tp", "message",
];

fn opt_str<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn parse_opt<T: FromStr>(s: &str, what: &str) -> Result<Option<T>> {
    if s == "NA" || s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse(format!("bad {what} `{s}`")))
}

fn parse_req<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse(format!("bad {what} `{s}`")))
}

impl EvalReport {
    pub fn merge(reports: impl IntoIterator<Item = EvalReport>) -> EvalReport {
        let mut rows: Vec<EvalRow> = reports.into_iter().flat_map(|r| r.rows).collect();
        rows.sort_by(|a, b| row_key(a).cmp(&row_key(b)).then(a.split.cmp(&b.split)));
        EvalReport { rows }
    }

    /// Groups rows by `(model, Q, R, horizon)` and pools successful splits.
    pub fn summarize(&self) -> Vec<SummaryRow> {
        let mut groups: BTreeMap<GroupKey, Vec<&EvalRow>> = BTreeMap::new();
        for row in &self.rows {
            groups.entry(row_key(row)).or_default().push(row);
        }
        groups
            .into_iter()
            .map(|((model, q, r, horizon), rows)| {
                let ok: Vec<&&EvalRow> = rows.iter().filter(|r| r.is_ok()).collect();
                let mut pooled = MetricAccumulator::default();
                ok.iter().for_each(|r| pooled.merge(&r.acc));
                let se = Criterion::ALL.map(|c| {
                    let vals: Vec<f64> = ok.iter().filter_map(|r| c.of_acc(&r.acc)).collect();
                    (vals.len() >= 2).then(|| (crate::stats::variance(&vals) / vals.len() as f64).sqrt())
                });
                SummaryRow {
                    model,
                    q,
                    r,
                    horizon,
                    n_splits: rows.len(),
                    n_failed: rows.len() - ok.len(),
                    pooled,
                    se,
                }
            })
            .collect()
    }

    /// The group of `model` at `horizon` with the best pooled `criterion`.
    pub fn best(&self, model: &str, horizon: usize, criterion: Criterion) -> Option<SummaryRow> {
        best_of(self.summarize().into_iter().filter(|s| s.model == model && s.horizon == horizon), criterion)
    }

    /// Most parsimonious `(Q, R)` (smallest `Q·R`, then `Q+R`) whose pooled
    /// criterion lies within one standard error of the best one.
    pub fn one_se_choice(&self, model: &str, horizon: usize, criterion: Criterion) -> Option<(usize, usize)> {
        let rows: Vec<SummaryRow> = self
            .summarize()
            .into_iter()
            .filter(|s| s.model == model && s.horizon == horizon && s.q.is_some() && s.r.is_some())
            .collect();
        let best = best_of(rows.iter().cloned(), criterion)?;
        let bv = best.value(criterion)?;
        let se = best.standard_error(criterion).unwrap_or(0.0);
        rows.iter()
            .filter(|s| match s.value(criterion) {
                Some(v) if criterion.higher_is_better() => v >= bv - se,
                Some(v) => v <= bv + se,
                None => false,
            })
            .map(|s| (s.q.unwrap(), s.r.unwrap()))
            .min_by_key(|&(q, r)| (q * r, q + r, q))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for row in &self.rows {
            let m = row.acc.metrics();
            let a = &row.acc;
            let (status, message) = match &row.status {
                RowStatus::Ok => ("ok", String::new()),
                RowStatus::Failed(msg) => ("failed", msg.clone()),
            };
            w.write_record([
                row.model.clone(),
                opt_str(row.q),
                opt_str(row.r),
                row.horizon.to_string(),
                row.split.to_string(),
                status.to_string(),
                a.n.to_string(),
                opt_str(m.map(|m| m.rmse)),
                opt_str(m.map(|m| m.mae)),
                opt_str(m.and_then(|m| m.corr)),
                opt_str(a.lps()),
                a.n_lps.to_string(),
                a.lps_sum.to_string(),
                a.sse.to_string(),
                a.sae.to_string(),
                a.mean_t.to_string(),
                a.mean_p.to_string(),
                a.m2_t.to_string(),
                a.m2_p.to_string(),
                a.c_tp.to_string(),
                message,
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a report written by [`EvalReport::write_csv`]. Derived columns
    /// (`rmse`, `mae`, `corr`, `lps`) are recomputed from the statistics.
    pub fn read_csv<R: Read>(source: R) -> Result<EvalReport> {
        let mut rdr = csv::Reader::from_reader(source);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn(name.to_string()));
        let idx: Vec<usize> = CSV_HEADER.iter().map(|h| col(h)).collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let f = |k: usize| rec.get(idx[k]).unwrap_or("");
            let status = match f(5) {
                "ok" => RowStatus::Ok,
                "failed" => RowStatus::Failed(f(20).to_string()),
                other => return Err(Error::Parse(format!("bad status `{other}`"))),
            };
            rows.push(EvalRow {
                model: f(0).to_string(),
                q: parse_opt(f(1), "q")?,
                r: parse_opt(f(2), "r")?,
                horizon: parse_req(f(3), "horizon")?,
                split: parse_req(f(4), "split")?,
                status,
                acc: MetricAccumulator {
                    n: parse_req(f(6), "n")?,
                    n_lps: parse_req(f(11), "n_lps")?,
                    lps_sum: parse_req(f(12), "lps_sum")?,
                    sse: parse_req(f(13), "sse")?,
                    sae: parse_req(f(14), "sae")?,
                    mean_t: parse_req(f(15), "mean_t")?,
                    mean_p: parse_req(f(16), "mean_p")?,
                    m2_t: parse_req(f(17), "m2_t")?,
                    m2_p: parse_req(f(18), "m2_p")?,
                    c_tp: parse_req(f(19), "c_tp")?,
                },
                predictions: Vec::new(),
            });
        }
        Ok(EvalReport { rows })
    }

    /// Per-cell `(truth, prediction)` pairs of every row.
    pub fn write_predictions_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "q", "r", "horizon", "split", "truth", "prediction"])?;
        for row in &self.rows {
            for (t, p) in &row.predictions {
                w.write_record([
                    row.model.clone(),
                    opt_str(row.q),
                    opt_str(row.r),
                    row.horizon.to_string(),
                    row.split.to_string(),
                    t.to_string(),
                    p.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Pooled summary per group, one line per `(model, Q, R, horizon)`.
    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "model", "q", "r", "horizon", "n_splits", "n_failed", "n", "rmse", "rmse_se", "mae", "mae_se", "corr", "corr_se",
            "lps", "lps_se",
        ])?;
        for s in self.summarize() {
            let mut rec = vec![
                s.model.clone(),
                opt_str(s.q),
                opt_str(s.r),
                s.horizon.to_string(),
                s.n_splits.to_string(),
                s.n_failed.to_string(),
                s.pooled.n.to_string(),
            ];
            for c in Criterion::ALL {
                rec.push(opt_str(s.value(c)));
                rec.push(opt_str(s.standard_error(c)));
            }
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn row_key(r: &EvalRow) -> GroupKey {
    (r.model.clone(), r.q, r.r, r.horizon)
}

fn best_of(rows: impl Iterator<Item = SummaryRow>, c: Criterion) -> Option<SummaryRow> {
    rows.filter(|s| s.value(c).is_some_and(f64::is_finite)).min_by(|a, b| {
        let (x, y) = (a.value(c).unwrap(), b.value(c).unwrap());
        if c.higher_is_better() {
            y.total_cmp(&x)
        } else {
            x.total_cmp(&y)
        }
    })
}

/// Settings shared by every Bayesian fit inside the harness. The factor
/// counts in `prior` and the seed in `sampler` are replaced per job.
#[derive(Debug, Clone)]
pub struct FitSettings {
    pub prior: PriorSpec,
    pub sampler: SamplerConfig,
    /// Master seed; job seeds are derived from it and the job coordinates.
    pub seed: u64,
}

impl FitSettings {
    fn job(&self, q: usize, r: usize, split: usize, key: u64) -> (PriorSpec, SamplerConfig) {
        let prior = PriorSpec { q, r, ..self.prior.clone() };
        let sampler = SamplerConfig {
            seed: derive_seed(self.seed, split as u64, Tag::Grid, key),
            track_predictive: true,
            ..self.sampler.clone()
        };
        (prior, sampler)
    }
}

fn chain_failure(store: &DrawStore) -> Option<String> {
    match &store.status {
        ChainStatus::Completed => None,
        ChainStatus::Aborted { iteration, reason } => Some(format!("aborted at iteration {iteration}: {reason}")),
    }
}

#[derive(Debug, Clone)]
pub struct CvConfig {
    pub fit: FitSettings,
    pub folds: usize,
    /// Run only the first `m` folds of the `folds`-way partition.
    pub max_folds: Option<usize>,
}

fn cv_job(panel: &CountPanel, held: &[bool], q: usize, r: usize, fold: usize, cfg: &CvConfig) -> EvalRow {
    let model = Model::Bayesian { q, r };
    let (n, t, a) = panel.dims();
    let train_mask: Vec<bool> = panel.mask().iter().zip(held).map(|(&m, &h)| m && !h).collect();
    let train = match panel.with_mask(train_mask) {
        Ok(p) => p,
        Err(e) => return EvalRow::failed(&model, 0, fold, e.to_string()),
    };
    let mut cells = Vec::new();
    for i in 0..n {
        for tt in 0..t {
            for x in 0..a {
                if held[panel.index(i, tt, x)] {
                    cells.push((i, tt, x, panel.count(i, tt, x), panel.offset(i, tt, x)));
                }
            }
        }
    }
    let (prior, sampler) = cfg.fit.job(q, r, fold, model.seed_key());
    let mut scores = vec![LogMeanExp::default(); cells.len()];
    let result = run_chain_with_observer(&train, &prior, &sampler, Init::Auto, |_, state| {
        for (k, &(i, tt, x, y, o)) in cells.iter().enumerate() {
            scores[k].push(poisson_loglik_cell(y, o, state.z[i][(tt, x)]));
        }
    });
    let store = match result {
        Ok(s) => s,
        Err(e) => return EvalRow::failed(&model, 0, fold, e.to_string()),
    };
    if let Some(reason) = chain_failure(&store) {
        return EvalRow::failed(&model, 0, fold, reason);
    }
    let means: Vec<DMatrix<f64>> = (0..n).map(|i| store.predictive_mean_matrix(i)).collect();
    let mut row = EvalRow::new(&model, 0, fold);
    for (k, &(i, tt, x, y, _)) in cells.iter().enumerate() {
        row.record((y as f64).ln_1p(), means[i][(tt, x)]);
        row.acc.push_lps(scores[k].value());
    }
    row
}

/// Cell-wise cross-validation of the Bayesian model over every `(Q, R)` in
/// the grid. Held-out cells are predicted by the posterior predictive mean
/// of `log(1 + y)` and scored by their log predictive score.
pub fn run_cv_grid(panel: &CountPanel, q_range: &[usize], r_range: &[usize], cfg: &CvConfig) -> Result<EvalReport> {
    if q_range.is_empty() || r_range.is_empty() {
        return invalid("the (Q, R) grid is empty");
    }
    if q_range.contains(&0) || r_range.contains(&0) {
        return invalid("factor counts must be positive");
    }
    let folds = cv_partition(panel, cfg.folds, cfg.fit.seed)?;
    let n_folds = cfg.max_folds.unwrap_or(cfg.folds).min(cfg.folds);
    let jobs: Vec<(usize, usize, usize)> = q_range
        .iter()
        .flat_map(|&q| r_range.iter().flat_map(move |&r| (0..n_folds).map(move |f| (q, r, f))))
        .collect();
    let rows = par::map_collect(jobs.len(), |j| {
        let (q, r, f) = jobs[j];
        cv_job(panel, &folds[f], q, r, f, cfg)
    });
    Ok(EvalReport::merge([EvalReport { rows }]))
}

/// Rolling-origin scheme: one-step forecasts from every window whose target
/// year exists, plus a longer horizon from the first window only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowScheme {
    pub train_len: usize,
    pub long_horizon: Option<usize>,
}

impl Default for WindowScheme {
    fn default() -> Self {
        Self { train_len: 17, long_horizon: Some(5) }
    }
}

impl WindowScheme {
    /// `(window start, horizons)` for a panel with `t` years.
    pub fn windows(&self, t: usize) -> Result<Vec<(usize, Vec<usize>)>> {
        if self.train_len < 2 || self.train_len >= t {
            return invalid(format!("training length {} does not fit a panel of {t} years", self.train_len));
        }
        let mut out: Vec<(usize, Vec<usize>)> = (0..t - self.train_len).map(|s| (s, vec![1])).collect();
        if let Some(h) = self.long_horizon.filter(|&h| h > 1) {
            if self.train_len + h > t {
                return invalid(format!("horizon {h} from the first window runs past the panel"));
            }
            out[0].1.push(h);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct ForecastEvalConfig {
    pub fit: FitSettings,
    pub scheme: WindowScheme,
    /// Predictive replicates per retained draw.
    pub replicates: usize,
}

fn forecast_job(panel: &CountPanel, model: &Model, start: usize, horizons: &[usize], window: usize, cfg: &ForecastEvalConfig) -> Vec<EvalRow> {
    let end = start + cfg.scheme.train_len;
    let (n, _, a) = panel.dims();
    let train = match panel.time_slice(start, end) {
        Ok(p) => p,
        Err(e) => return horizons.iter().map(|&h| EvalRow::failed(model, h, window, e.to_string())).collect(),
    };
    let observed = |h: usize| -> Vec<(usize, usize)> {
        (0..n).flat_map(|i| (0..a).map(move |x| (i, x))).filter(|&(i, x)| panel.is_observed(i, end + h - 1, x)).collect()
    };
    let truth = |i: usize, h: usize, x: usize| (panel.count(i, end + h - 1, x) as f64).ln_1p();
    match model {
        Model::Benchmark(spec) => {
            let logs = to_log_panel(&train);
            horizons
                .iter()
                .map(|&h| match spec.forecast(&logs, h) {
                    Ok(fc) => {
                        let mut row = EvalRow::new(model, h, window);
                        for (i, x) in observed(h) {
                            row.record(truth(i, h, x), fc[(i, x)]);
                        }
                        row
                    }
                    Err(e) => EvalRow::failed(model, h, window, e.to_string()),
                })
                .collect()
        }
        Model::Bayesian { q, r } => {
            let fail = |msg: String| horizons.iter().map(|&h| EvalRow::failed(model, h, window, msg.clone())).collect();
            let (prior, sampler) = cfg.fit.job(*q, *r, window, model.seed_key());
            let store = match run_chain(&train, &prior, &sampler, Init::Auto) {
                Ok(s) => s,
                Err(e) => return fail(e.to_string()),
            };
            if let Some(reason) = chain_failure(&store) {
                return fail(reason);
            }
            let targets: Vec<ForecastTarget> = horizons
                .iter()
                .flat_map(|&h| observed(h).into_iter().map(move |(i, x)| (i, h, x)))
                .map(|(i, h, x)| ForecastTarget { i, h, x, y: panel.count(i, end + h - 1, x) })
                .collect();
            let opts = ForecastOptions {
                horizon: horizons.iter().copied().max().unwrap_or(1),
                replicates: cfg.replicates,
                seed: sampler.seed,
                ..ForecastOptions::default()
            };
            let scores = match forecast_scores(&store, &train, &targets, &opts) {
                Ok(s) => s,
                Err(e) => return fail(e.to_string()),
            };
            horizons
                .iter()
                .map(|&h| {
                    let mut row = EvalRow::new(model, h, window);
                    for (g, s) in targets.iter().zip(&scores).filter(|(g, _)| g.h == h) {
                        row.record(truth(g.i, h, g.x), s.log1p_mean);
                        row.acc.push_lps(s.log_score);
                    }
                    row
                })
                .collect()
        }
    }
}

/// Rolling-origin evaluation of every model on the `log(1 + y)` scale.
pub fn run_forecast_eval(panel: &CountPanel, models: &[Model], cfg: &ForecastEvalConfig) -> Result<EvalReport> {
    if models.is_empty() {
        return invalid("no models to evaluate");
    }
    if cfg.replicates == 0 {
        return invalid("replicates must be positive");
    }
    let windows = cfg.scheme.windows(panel.dims().1)?;
    let jobs: Vec<(usize, usize)> = (0..windows.len()).flat_map(|w| (0..models.len()).map(move |m| (w, m))).collect();
    let rows = par::map_collect(jobs.len(), |j| {
        let (w, m) = jobs[j];
        let (start, horizons) = &windows[w];
        forecast_job(panel, &models[m], *start, horizons, w, cfg)
    });
    Ok(EvalReport::merge([EvalReport { rows: rows.into_iter().flatten().collect() }]))
}

/// One model line of a forecast-performance table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub label: String,
    pub q: Option<usize>,
    pub r: Option<usize>,
    /// `(horizon, pooled metrics)` in increasing horizon order.
    pub horizons: Vec<(usize, Option<PointMetrics>)>,
}

fn model_label(name: &str) -> String {
    if name == BAYES_NAME {
        return "Bayesian Matrix Factorization".to_string();
    }
    name.parse::<BenchmarkKind>().map_or_else(|_| name.to_string(), |k| k.label().to_string())
}

fn model_rank(name: &str) -> usize {
    if name == BAYES_NAME {
        return 0;
    }
    name.parse::<BenchmarkKind>()
        .map_or(usize::MAX, |k| 1 + BenchmarkKind::ALL.iter().position(|&x| x == k).unwrap())
}

/// One line per model with the `(Q, R)` that has the lowest pooled RMSE at
/// the shortest horizon, and its metrics at every horizon.
pub fn forecast_table(report: &EvalReport) -> Vec<TableRow> {
    let summary = report.summarize();
    let mut horizons: Vec<usize> = summary.iter().map(|s| s.horizon).filter(|&h| h > 0).collect();
    horizons.sort_unstable();
    horizons.dedup();
    let Some(&h_sel) = horizons.first() else {
        return Vec::new();
    };
    let mut models: Vec<String> = summary.iter().map(|s| s.model.clone()).collect();
    models.sort_by_key(|m| (model_rank(m), m.clone()));
    models.dedup();
    models
        .into_iter()
        .filter_map(|m| {
            let best = best_of(summary.iter().filter(|s| s.model == m && s.horizon == h_sel).cloned(), Criterion::Rmse)?;
            let per_h = horizons
                .iter()
                .map(|&h| {
                    let s = summary.iter().find(|s| s.model == m && s.q == best.q && s.r == best.r && s.horizon == h);
                    (h, s.and_then(|s| s.pooled.metrics()))
                })
                .collect();
            Some(TableRow { label: model_label(&m), model: m, q: best.q, r: best.r, horizons: per_h })
        })
        .collect()
}

pub fn write_table_csv<W: Write>(rows: &[TableRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model".to_string(), "Q".into(), "R".into()];
    if let Some(first) = rows.first() {
        for (h, _) in &first.horizons {
            header.extend([format!("rmse_h{h}"), format!("mae_h{h}"), format!("corr_h{h}")]);
        }
    }
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![row.label.clone(), opt_str(row.q), opt_str(row.r)];
        for (_, m) in &row.horizons {
            rec.push(opt_str(m.map(|m| m.rmse)));
            rec.push(opt_str(m.map(|m| m.mae)));
            rec.push(opt_str(m.and_then(|m| m.corr)));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text rendering of [`forecast_table`].
pub fn format_table(rows: &[TableRow]) -> String {
    let f3 = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
    let mut s = format!("{:<32} {:>3} {:>3}", "Model", "Q", "R");
    if let Some(first) = rows.first() {
        for (h, _) in &first.horizons {
            s += &format!(" | {:>7} {:>7} {:>7}", format!("RMSE{h}"), format!("MAE{h}"), format!("Corr{h}"));
        }
    }
    s.push('\n');
    for row in rows {
        let q = row.q.map_or("-".to_string(), |v| v.to_string());
        let r = row.r.map_or("-".to_string(), |v| v.to_string());
        s += &format!("{:<32} {:>3} {:>3}", row.label, q, r);
        for (_, m) in &row.horizons {
            s += &format!(
                " | {:>7} {:>7} {:>7}",
                f3(m.map(|m| m.rmse)),
                f3(m.map(|m| m.mae)),
                f3(m.and_then(|m| m.corr))
            );
        }
        s.push('\n');
    }
    s
}
