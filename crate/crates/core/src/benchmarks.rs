//! Competitor point forecasters on the `log(1 + y)` scale: random walks with
//! and without drift, and SVD time or age factorizations fitted per
//! population (separate) or across all populations (joint).
//!
//! All forecasters are deterministic functions of the training panel.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::data::LogPanel;
use crate::error::{invalid, Error, Result};
use crate::linalg::{complete_orthonormal, lstsq_min_norm, ordered_svd};
use crate::par;

/// Row standard deviations below this are treated as zero when scaling.
pub const SCALE_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BenchmarkKind {
    Rw,
    RwDrift,
    TimeFactSep,
    TimeFactJoint,
    AgeFactSep,
    AgeFactJoint,
}

impl BenchmarkKind {
    pub const ALL: [BenchmarkKind; 6] = [
        BenchmarkKind::Rw,
        BenchmarkKind::RwDrift,
        BenchmarkKind::TimeFactSep,
        BenchmarkKind::TimeFactJoint,
        BenchmarkKind::AgeFactSep,
        BenchmarkKind::AgeFactJoint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchmarkKind::Rw => "rw",
            BenchmarkKind::RwDrift => "rw_drift",
            BenchmarkKind::TimeFactSep => "time_fact_sep",
            BenchmarkKind::TimeFactJoint => "time_fact_joint",
            BenchmarkKind::AgeFactSep => "age_fact_sep",
            BenchmarkKind::AgeFactJoint => "age_fact_joint",
        }
    }

    /// Human-readable label used in Table-1 style reports.
    pub fn label(self) -> &'static str {
        match self {
            BenchmarkKind::Rw => "Random Walk",
            BenchmarkKind::RwDrift => "Random Walk with Drift",
            BenchmarkKind::TimeFactSep => "Time Factorization (separate)",
            BenchmarkKind::TimeFactJoint => "Time Factorization (joint)",
            BenchmarkKind::AgeFactSep => "Age Factorization (separate)",
            BenchmarkKind::AgeFactJoint => "Age Factorization (joint)",
        }
    }

    pub fn uses_factors(self) -> bool {
        !matches!(self, BenchmarkKind::Rw | BenchmarkKind::RwDrift)
    }
}

impl fmt::Display for BenchmarkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchmarkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchmarkKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Parse(format!("unknown benchmark `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BenchmarkSpec {
    pub kind: BenchmarkKind,
    /// Number of factors for the factorization kinds; ignored by the random walks.
    pub n_factors: usize,
}

impl BenchmarkSpec {
    pub fn new(kind: BenchmarkKind, n_factors: usize) -> Result<Self> {
        if kind.uses_factors() && n_factors == 0 {
            return invalid(format!("{kind} needs at least one factor"));
        }
        Ok(Self { kind, n_factors })
    }

    /// Point forecast at horizon `h`, `N×A`.
    pub fn forecast(&self, panel: &LogPanel, h: usize) -> Result<DMatrix<f64>> {
        let k = self.n_factors;
        match self.kind {
            BenchmarkKind::Rw => rw_panel_forecast(panel, h, false),
            BenchmarkKind::RwDrift => rw_panel_forecast(panel, h, true),
            BenchmarkKind::TimeFactSep => time_factorization_forecast(panel, k, false, h),
            BenchmarkKind::TimeFactJoint => time_factorization_forecast(panel, k, true, h),
            BenchmarkKind::AgeFactSep => age_factorization_forecast(panel, k, false, h),
            BenchmarkKind::AgeFactJoint => age_factorization_forecast(panel, k, true, h),
        }
    }
}

/// Univariate random-walk forecast `h` steps past the end of `series`.
/// With drift the step is the mean first difference.
pub fn rw_forecast(series: &[f64], h: usize, drift: bool) -> Result<f64> {
    let n = series.len();
    if n == 0 || (drift && n < 2) {
        return invalid(format!("random walk{} needs a longer series (got {n})", if drift { " with drift" } else { "" }));
    }
    let last = series[n - 1];
    if !drift {
        return Ok(last);
    }
    let slope = (last - series[0]) / (n - 1) as f64;
    Ok(last + h as f64 * slope)
}

fn rw_panel_forecast(panel: &LogPanel, h: usize, drift: bool) -> Result<DMatrix<f64>> {
    let (n, t, a) = panel.dims();
    let mut out = DMatrix::zeros(n, a);
    for i in 0..n {
        for x in 0..a {
            let series: Vec<f64> = (0..t).map(|tt| panel.value(i, tt, x)).collect();
            out[(i, x)] = rw_forecast(&series, h, drift)?;
        }
    }
    Ok(out)
}

/// Subtracts each row's mean and divides by its sample standard deviation
/// (left unscaled when the deviation is below [`SCALE_GUARD`]).
pub fn center_scale_rows(d: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = d.clone();
    let m = d.ncols();
    for mut row in out.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
        let sd = if m > 1 { (row.norm_squared() / (m - 1) as f64).sqrt() } else { 0.0 };
        if sd >= SCALE_GUARD {
            row /= sd;
        }
    }
    out
}

/// `k` orthonormal columns spanning the leading right singular subspace of
/// `d`, completed with further directions when `d` has lower rank.
pub fn leading_right_vectors(d: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let svd = ordered_svd(d);
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let tol = smax * 1e-10 * d.nrows().max(d.ncols()) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol && s > 0.0).count();
    let basis = svd.v.columns(0, rank.min(k)).into_owned();
    complete_orthonormal(&basis, k)
}

/// Time-factor regression of a block of series (rows) on `k` extracted time
/// factors. Returns `(in-sample fit, h-step forecast per row)`.
fn time_block(series: &DMatrix<f64>, factors: &DMatrix<f64>, h: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let t = series.ncols();
    let k = factors.ncols();
    let design = DMatrix::from_fn(t, k + 1, |tt, c| if c == 0 { 1.0 } else { factors[(tt, c - 1)] });
    let coef = lstsq_min_norm(&design, &series.transpose()); // (k+1) × rows
    let fit = (&design * &coef).transpose();
    let mut future = DVector::from_element(k + 1, 1.0);
    for c in 0..k {
        let path: Vec<f64> = factors.column(c).iter().copied().collect();
        future[c + 1] = rw_forecast(&path, h, true)?;
    }
    Ok((fit, coef.transpose() * future))
}

/// Rows = ages, columns = time for population `i`.
fn age_by_time(panel: &LogPanel, i: usize) -> DMatrix<f64> {
    panel.matrix(i).transpose()
}

fn check_grid(panel: &LogPanel, k: usize, limit: usize, what: &str) -> Result<()> {
    let (_, t, a) = panel.dims();
    if t < 2 || a < 1 {
        return invalid("factorization forecasts need at least two training years");
    }
    if k == 0 || k > limit {
        return invalid(format!("{what}: {k} factors requested, at most {limit} available"));
    }
    Ok(())
}

/// In-sample fit (`N` matrices `T×A`) and `h`-step forecast (`N×A`) of the
/// time factorization.
pub fn time_factorization_fit(panel: &LogPanel, q: usize, joint: bool, h: usize) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    let (n, t, a) = panel.dims();
    check_grid(panel, q, t, "time factorization")?;
    let blocks: Vec<Result<(DMatrix<f64>, DVector<f64>)>> = if joint {
        // stack all (age, population) series
        let stacked = DMatrix::from_fn(a * n, t, |row, tt| panel.value(row / a, tt, row % a));
        let factors = leading_right_vectors(&center_scale_rows(&stacked), q);
        let (fit, fc) = time_block(&stacked, &factors, h)?;
        (0..n)
            .map(|i| Ok((fit.rows(i * a, a).into_owned(), fc.rows(i * a, a).into_owned())))
            .collect()
    } else {
        par::map_collect(n, |i| {
            let d = age_by_time(panel, i);
            let factors = leading_right_vectors(&center_scale_rows(&d), q);
            time_block(&d, &factors, h)
        })
    };
    let mut fits = Vec::with_capacity(n);
    let mut out = DMatrix::zeros(n, a);
    for (i, b) in blocks.into_iter().enumerate() {
        let (fit, fc) = b?;
        fits.push(fit.transpose());
        out.set_row(i, &fc.transpose());
    }
    Ok((fits, out))
}

pub fn time_factorization_forecast(panel: &LogPanel, q: usize, joint: bool, h: usize) -> Result<DMatrix<f64>> {
    Ok(time_factorization_fit(panel, q, joint, h)?.1)
}

/// Loadings `β_{i,t}` of the age profiles on `f_a` after removing the
/// intercept `α_i` (the population's training mean), their in-sample fit and
/// the `h`-step forecast of the profile.
fn age_population(panel: &LogPanel, i: usize, f_a: &DMatrix<f64>, h: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let y = panel.matrix(i); // T×A
    let alpha = y.mean();
    let beta = lstsq_min_norm(f_a, &y.transpose().add_scalar(-alpha)); // R×T
    let fit = (f_a * &beta).transpose().add_scalar(alpha);
    let r = f_a.ncols();
    let mut b_future = DVector::zeros(r);
    for k in 0..r {
        let path: Vec<f64> = beta.row(k).iter().copied().collect();
        b_future[k] = rw_forecast(&path, h, true)?;
    }
    Ok((fit, (f_a * b_future).add_scalar(alpha)))
}

/// In-sample fit and `h`-step forecast of the age factorization.
pub fn age_factorization_fit(panel: &LogPanel, r: usize, joint: bool, h: usize) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    let (n, t, a) = panel.dims();
    check_grid(panel, r, a, "age factorization")?;
    let shared = joint.then(|| {
        let stacked = DMatrix::from_fn(t * n, a, |row, x| panel.value(row / t, row % t, x));
        leading_right_vectors(&center_scale_rows(&stacked), r)
    });
    let blocks = par::map_collect(n, |i| {
        let f_a = match &shared {
            Some(f) => f.clone(),
            None => leading_right_vectors(&center_scale_rows(&panel.matrix(i)), r),
        };
        age_population(panel, i, &f_a, h)
    });
    let mut fits = Vec::with_capacity(n);
    let mut out = DMatrix::zeros(n, a);
    for (i, b) in blocks.into_iter().enumerate() {
        let (fit, fc) = b?;
        fits.push(fit);
        out.set_row(i, &fc.transpose());
    }
    Ok((fits, out))
}

pub fn age_factorization_forecast(panel: &LogPanel, r: usize, joint: bool, h: usize) -> Result<DMatrix<f64>> {
    Ok(age_factorization_fit(panel, r, joint, h)?.1)
}
