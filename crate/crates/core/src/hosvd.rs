//! Ex-post orthogonal factors of fitted surfaces.
//!
//! The sampler leaves loadings unrestricted, so its factors are identified only
//! up to rotation. After fitting, the posterior-mean surfaces are centered per
//! population and decomposed along the time and age modes; the resulting unit
//! norm components are what gets plotted and compared.

use std::io::Write;

use nalgebra::DMatrix;

use crate::error::{invalid, Result};
use crate::linalg::{normalize_signs, ordered_svd};
use crate::stats::correlation;

/// Subtracts each population's scalar mean over its `T×A` slice.
pub fn center_fitted_array(fitted: &[DMatrix<f64>]) -> (Vec<DMatrix<f64>>, Vec<f64>) {
    let means: Vec<f64> = fitted.iter().map(|m| m.mean()).collect();
    let centered = fitted.iter().zip(&means).map(|(m, mu)| m.map(|v| v - mu)).collect();
    (centered, means)
}

/// Mode components and the share of total variation each one explains.
#[derive(Debug, Clone, PartialEq)]
pub struct HosvdModes {
    /// `T×Q'` with `Q' ≤ Q` after rank truncation.
    pub time: DMatrix<f64>,
    /// `A×R'`.
    pub age: DMatrix<f64>,
    pub time_shares: Vec<f64>,
    pub age_shares: Vec<f64>,
}

/// Time-mode matricization `T × (A·N)`.
pub fn time_unfolding(slices: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (t, a) = slices[0].shape();
    DMatrix::from_fn(t, a * slices.len(), |tt, c| slices[c / a][(tt, c % a)])
}

/// Age-mode matricization `A × (T·N)`.
pub fn age_unfolding(slices: &[DMatrix<f64>]) -> DMatrix<f64> {
    let (t, a) = slices[0].shape();
    DMatrix::from_fn(a, t * slices.len(), |x, c| slices[c / t][(c % t, x)])
}

fn leading(m: &DMatrix<f64>, k: usize, mode: &str) -> (DMatrix<f64>, Vec<f64>) {
    let svd = ordered_svd(m);
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let tol = smax * 1e-10 * m.nrows().max(m.ncols()) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol && s > 0.0).count();
    let keep = k.min(rank);
    if keep < k {
        log::warn!("{mode} mode has numerical rank {rank}; returning {keep} of {k} requested components");
    }
    let mut comps = svd.u.columns(0, keep).into_owned();
    normalize_signs(&mut comps);
    let shares = svd.singular_values[..keep].iter().map(|s| s * s / total).collect();
    (comps, shares)
}

/// Leading left singular vectors of the time and age unfoldings.
pub fn hosvd_modes(centered: &[DMatrix<f64>], q: usize, r: usize) -> Result<HosvdModes> {
    let Some(first) = centered.first() else {
        return invalid("no populations to decompose");
    };
    let (t, a) = first.shape();
    if centered.iter().any(|m| m.shape() != (t, a)) {
        return invalid("population slices differ in shape");
    }
    if q > t || r > a {
        return invalid(format!("requested {q} time / {r} age components for a {t}×{a} grid"));
    }
    let (time, time_shares) = leading(&time_unfolding(centered), q, "time");
    let (age, age_shares) = leading(&age_unfolding(centered), r, "age");
    Ok(HosvdModes {
        time,
        age,
        time_shares,
        age_shares,
    })
}

/// Frobenius error of projecting each slice onto `span(time) × span(age)`.
/// Both bases must have orthonormal columns.
pub fn projection_error(centered: &[DMatrix<f64>], time: &DMatrix<f64>, age: &DMatrix<f64>) -> f64 {
    let pt = time * time.transpose();
    let pa = age * age.transpose();
    centered
        .iter()
        .map(|m| (m - &pt * m * &pa).norm_squared())
        .sum::<f64>()
        .sqrt()
}

/// `|corr(a_k, b_k)|` for each shared column `k`; zero when a column is constant.
pub fn component_abs_correlations(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    (0..a.ncols().min(b.ncols()))
        .map(|k| {
            let x: Vec<f64> = a.column(k).iter().copied().collect();
            let y: Vec<f64> = b.column(k).iter().copied().collect();
            correlation(&x, &y).map_or(0.0, f64::abs)
        })
        .collect()
}

/// Writes one row per grid point with one column per component.
pub fn write_components<W: Write>(out: W, index_name: &str, labels: &[String], comps: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![index_name.to_string()];
    header.extend((1..=comps.ncols()).map(|k| format!("component_{k}")));
    w.write_record(&header)?;
    for (row, label) in labels.iter().enumerate().take(comps.nrows()) {
        let mut rec = vec![label.clone()];
        rec.extend(comps.row(row).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_explained<W: Write>(out: W, modes: &HosvdModes) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mode", "component", "share", "cumulative"])?;
    for (mode, shares) in [("time", &modes.time_shares), ("age", &modes.age_shares)] {
        let mut cum = 0.0;
        for (k, s) in shares.iter().enumerate() {
            cum += s;
            w.write_record([mode.to_string(), (k + 1).to_string(), s.to_string(), cum.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
