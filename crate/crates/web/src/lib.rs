//! Browser bindings for a small interactive demo: simulate a panel, fit and
//! forecast it, and extract HOSVD components.
//!
//! Every export returns a JSON string. Failures come back as
//! `{"error": "..."}` so the page never has to catch exceptions.

use bpmf_core::eval::point_metrics;
use bpmf_core::forecast::{aggregate_functional, aggregate_quantiles, forecast_counts, ForecastOptions, Reducer};
use bpmf_core::hosvd::{center_fitted_array, hosvd_modes};
use bpmf_core::sampler::{run_chain, Init};
use bpmf_core::simulate::{simulate_panel, SimConfig};
use bpmf_core::{CountPanel, PriorSpec, SamplerConfig};
use nalgebra::DMatrix;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Largest panel the page may request; keeps the sampler interactive.
const MAX_CELLS: usize = 20_000;
const FAN_PROBS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

fn demo_config(n: usize, t: usize, a: usize, q: usize, r: usize, seed: u64) -> Result<SimConfig, String> {
    if n * t * a > MAX_CELLS {
        return Err(format!("panel too large for the demo ({} cells, limit {MAX_CELLS})", n * t * a));
    }
    if q == 0 || r == 0 || q > 3 || r > 3 {
        return Err("the demo supports 1 to 3 factors per margin".into());
    }
    let base = SimConfig::default();
    let cfg = SimConfig {
        n,
        t,
        a,
        q,
        r,
        tau_t: base.tau_t[..q].to_vec(),
        tau_a: base.tau_a[..r].to_vec(),
        kappa: base.kappa[..q].to_vec(),
        seed,
        ..base
    };
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn log_counts(panel: &CountPanel, i: usize) -> DMatrix<f64> {
    let (_, t, a) = panel.dims();
    DMatrix::from_fn(t, a, |tt, x| (panel.count(i, tt, x) as f64).ln_1p())
}

fn labels(panel: &CountPanel) -> Value {
    json!({
        "populations": panel.population_labels(),
        "years": panel.year_labels(),
        "ages": panel.age_labels(),
    })
}

fn render(result: Result<Value, String>) -> String {
    match result {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

pub fn simulate_surface_value(n: usize, t: usize, a: usize, q: usize, r: usize, seed: u64) -> Result<Value, String> {
    let cfg = demo_config(n, t, a, q, r, seed)?;
    let (panel, truth) = simulate_panel(&cfg).map_err(|e| e.to_string())?;
    Ok(json!({
        "labels": labels(&panel),
        "log_counts": (0..n).map(|i| rows(&log_counts(&panel, i))).collect::<Vec<_>>(),
        "signal": (0..n).map(|i| rows(&truth.fitted_mean(i))).collect::<Vec<_>>(),
        "sigma2": truth.sigma2,
        "kappa": truth.kappa,
    }))
}

/// Simulates an `n × t × a` panel from the model with `q` time and `r` age
/// factors. Returns log(1 + y) surfaces and the noise-free signal per population.
#[wasm_bindgen]
pub fn simulate_surface(n: usize, t: usize, a: usize, q: usize, r: usize, seed: u64) -> String {
    render(simulate_surface_value(n, t, a, q, r, seed))
}

pub fn fit_forecast_value(seed: u64, iterations: usize, horizon: usize, population: usize) -> Result<Value, String> {
    if !(20..=20_000).contains(&iterations) {
        return Err("iterations must lie in 20..=20000".into());
    }
    if horizon == 0 || horizon > 20 {
        return Err("horizon must lie in 1..=20".into());
    }
    let cfg = demo_config(4, 20, 12, 2, 2, seed)?;
    if population >= cfg.n {
        return Err(format!("population must be below {}", cfg.n));
    }
    let (panel, _) = simulate_panel(&cfg).map_err(|e| e.to_string())?;
    let prior = PriorSpec::new(cfg.q, cfg.r);
    let sampler = SamplerConfig::quick(iterations, iterations / 2, seed);
    let store = run_chain(&panel, &prior, &sampler, Init::Auto).map_err(|e| e.to_string())?;
    let opts = ForecastOptions { horizon, replicates: 4, seed, ..ForecastOptions::default() };
    let fs = forecast_counts(&store, &panel, &opts).map_err(|e| e.to_string())?;

    let (_, t, a) = panel.dims();
    let observed: Vec<u64> = (0..t).map(|tt| (0..a).map(|x| panel.count(population, tt, x)).sum()).collect();
    let fitted = store.predictive_mean_matrix(population);
    let mut fan = Vec::with_capacity(horizon);
    for h in 1..=horizon {
        let totals = aggregate_functional(&fs, |i, hh, _| i == population && hh == h, Reducer::Sum)
            .map_err(|e| e.to_string())?;
        fan.push(aggregate_quantiles(&totals, &FAN_PROBS));
    }
    let truth: Vec<f64> = log_counts(&panel, population).iter().copied().collect();
    let fit: Vec<f64> = fitted.iter().copied().collect();
    let metrics = point_metrics(&truth, &fit).map_err(|e| e.to_string())?;
    Ok(json!({
        "labels": labels(&panel),
        "population": population,
        "observed_totals": observed,
        "fitted_log_counts": rows(&fitted),
        "fan_probs": FAN_PROBS,
        "fan_years": (1..=horizon).map(|h| fs.origin_year + h as i64).collect::<Vec<_>>(),
        "fan": fan,
        "in_sample": { "rmse": metrics.rmse, "mae": metrics.mae, "corr": metrics.corr },
        "draws": store.n_draws(),
        "loglik_trace": store.loglik,
    }))
}

/// Fits a small simulated panel (4 populations, 20 years, 12 ages, Q=R=2) and
/// returns a forecast fan of yearly totals for one population.
#[wasm_bindgen]
pub fn fit_forecast(seed: u64, iterations: usize, horizon: usize, population: usize) -> String {
    render(fit_forecast_value(seed, iterations, horizon, population))
}

pub fn hosvd_value(seed: u64, q: usize, r: usize) -> Result<Value, String> {
    let cfg = demo_config(8, 25, 30, 3, 3, seed)?;
    let (panel, _) = simulate_panel(&cfg).map_err(|e| e.to_string())?;
    let surfaces: Vec<DMatrix<f64>> = (0..cfg.n).map(|i| log_counts(&panel, i)).collect();
    let (centered, means) = center_fitted_array(&surfaces);
    let modes = hosvd_modes(&centered, q, r).map_err(|e| e.to_string())?;
    let cols = |m: &DMatrix<f64>| m.column_iter().map(|c| c.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>();
    Ok(json!({
        "labels": labels(&panel),
        "time_components": cols(&modes.time),
        "age_components": cols(&modes.age),
        "time_shares": modes.time_shares,
        "age_shares": modes.age_shares,
        "population_means": means,
    }))
}

/// HOSVD time and age components of the centered log(1 + y) surfaces of a
/// simulated panel (8 populations, 25 years, 30 ages).
#[wasm_bindgen]
pub fn hosvd_components(seed: u64, q: usize, r: usize) -> String {
    render(hosvd_value(seed, q, r))
}
