//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion fails that is not a documented shortfall.
//!
//! Every expected value here is computed by an oracle written in this file
//! (dense designs, eigen-decompositions, analytic moments, forward
//! simulation) rather than by calling back into the code under test.

use std::time::{Duration, Instant};

use bpmf_core::benchmarks::{
    age_factorization_fit, rw_forecast, time_factorization_fit, BenchmarkKind, BenchmarkSpec,
};
use bpmf_core::data::to_log_panel;
use bpmf_core::eval::log_predictive_score;
use bpmf_core::forecast::{forecast_scores, ForecastOptions, ForecastTarget};
use bpmf_core::hosvd::{center_fitted_array, hosvd_modes};
use bpmf_core::params::count_parameters;
use bpmf_core::priors::{build_rw_precision, icar_conditional, LoadingVariance, ScalePrior};
use bpmf_core::sampler::{
    age_factor_conditional, loadings_conditional, poisson_loglik_cell, run_chain, time_factor_conditional,
    update_drift, update_noise_variances, update_smoothing_variances, Chain, Init,
};
use bpmf_core::simulate::{recovery_report, simulate_panel, SimConfig};
use bpmf_core::stats::{sample_inverse_gamma, sample_poisson, LogMeanExp};
use bpmf_core::{CountPanel, LogPanel, ModelState, PriorSpec, SamplerConfig};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Criteria allowed to print FAIL without failing the run. Each one has a
/// written explanation in the project's decision notes.
const KNOWN_SHORTFALLS: &[&str] = &["4b"];

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn outcome(id: &'static str, pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { id, pass, detail: detail.into() }
}

fn report(o: &Outcome, elapsed: Duration) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("{tag} [{}] {} ({:.1}s)", o.id, o.detail, elapsed.as_secs_f64());
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut impl Rng) -> f64 {
    r.sample(StandardNormal)
}

fn random_matrix(rows: usize, cols: usize, r: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(r))
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn rel_err_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// `(T-1)×T` first-difference matrix.
fn difference_matrix(m: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m - 1, m);
    for k in 0..m - 1 {
        d[(k, k)] = -1.0;
        d[(k, k + 1)] = 1.0;
    }
    d
}

fn gaussian_moments(precision: &DMatrix<f64>, shift: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let cov = precision.clone().try_inverse().expect("oracle precision is invertible");
    let mean = &cov * shift;
    (mean, cov)
}

// ---------------------------------------------------------------------------
// 1. closed-form conditionals against dense stacked regressions

fn random_instance(r: &mut ChaCha8Rng) -> (ModelState, PriorSpec) {
    let n = r.random_range(1..=3);
    let t = r.random_range(2..=5);
    let a = r.random_range(2..=6);
    let q = r.random_range(1..=2);
    let rr = r.random_range(1..=2);
    let state = ModelState {
        z: (0..n).map(|_| random_matrix(t, a, r)).collect(),
        f_t: random_matrix(t, q, r),
        f_a: random_matrix(a, rr, r),
        lambda: (0..n).map(|_| random_matrix(q, rr, r)).collect(),
        kappa: (0..q).map(|_| r.random_range(-0.5..0.5)).collect(),
        tau_t: (0..q).map(|_| r.random_range(0.1..2.0)).collect(),
        tau_a: (0..rr).map(|_| r.random_range(0.1..2.0)).collect(),
        sigma2: (0..n).map(|_| r.random_range(0.2..2.0)).collect(),
    };
    let mut prior = PriorSpec::new(q, rr);
    prior.loading_variance = LoadingVariance::PerElement((0..n * q * rr).map(|_| r.random_range(0.5..3.0)).collect());
    if r.random_bool(0.5) {
        prior.time_level_precision = r.random_range(0.1..1.0);
        prior.age_level_precision = r.random_range(0.1..1.0);
    }
    (state, prior)
}

/// `vec(Λ_i)` regression on the explicit `TA×QR` design `F_A ⊗ F_T`.
fn loadings_oracle(s: &ModelState, p: &PriorSpec, i: usize) -> (DVector<f64>, DMatrix<f64>) {
    let (t, q) = s.f_t.shape();
    let (a, r) = s.f_a.shape();
    let x = DMatrix::from_fn(t * a, q * r, |row, col| s.f_t[(row % t, col % q)] * s.f_a[(row / t, col / q)]);
    let y = DVector::from_fn(t * a, |row, _| s.z[i][(row % t, row / t)]);
    let inv = 1.0 / s.sigma2[i];
    let mut prec = x.transpose() * &x * inv;
    for col in 0..q * r {
        let (qq, rr) = (col % q, col / q);
        let l0 = match &p.loading_variance {
            LoadingVariance::Scalar(v) => *v,
            LoadingVariance::PerElement(v) => v[(i * r + rr) * q + qq],
        };
        prec[(col, col)] += 1.0 / l0;
    }
    gaussian_moments(&prec, &(x.transpose() * y * inv))
}

/// Time factor `q` from the stacked regression `vec(Z̃_i) = (w_i ⊗ I_T) f_q + e`.
fn time_factor_oracle(s: &ModelState, p: &PriorSpec, q: usize) -> (DVector<f64>, DMatrix<f64>) {
    let (t, nq) = s.f_t.shape();
    let a = s.f_a.nrows();
    let d = difference_matrix(t);
    let tau = s.tau_t[q];
    let mut prec = (d.transpose() * &d + DMatrix::identity(t, t) * p.time_level_precision) / tau;
    let mut shift = d.transpose() * DVector::from_element(t - 1, s.kappa[q] / tau);
    for i in 0..s.z.len() {
        let w = |k: usize| &s.f_a * s.lambda[i].row(k).transpose();
        let mut zt = s.z[i].clone();
        for k in (0..nq).filter(|&k| k != q) {
            zt -= s.f_t.column(k) * w(k).transpose();
        }
        let wq = w(q);
        let x = DMatrix::from_fn(t * a, t, |row, col| if row % t == col { wq[row / t] } else { 0.0 });
        let y = DVector::from_fn(t * a, |row, _| zt[(row % t, row / t)]);
        prec += x.transpose() * &x / s.sigma2[i];
        shift += x.transpose() * y / s.sigma2[i];
    }
    gaussian_moments(&prec, &shift)
}

/// Age factor `r` from `vec(Z̃_i) = (I_A ⊗ v_i) f_r + e`.
fn age_factor_oracle(s: &ModelState, p: &PriorSpec, r: usize) -> (DVector<f64>, DMatrix<f64>) {
    let t = s.f_t.nrows();
    let (a, nr) = s.f_a.shape();
    let d = difference_matrix(a);
    let tau = s.tau_a[r];
    let mut prec = (d.transpose() * &d + DMatrix::identity(a, a) * p.age_level_precision) / tau;
    let mut shift = DVector::zeros(a);
    for i in 0..s.z.len() {
        let v = |k: usize| &s.f_t * s.lambda[i].column(k);
        let mut zt = s.z[i].clone();
        for k in (0..nr).filter(|&k| k != r) {
            zt -= v(k) * s.f_a.column(k).transpose();
        }
        let vr = v(r);
        let x = DMatrix::from_fn(t * a, a, |row, col| if row / t == col { vr[row % t] } else { 0.0 });
        let y = DVector::from_fn(t * a, |row, _| zt[(row % t, row / t)]);
        prec += x.transpose() * &x / s.sigma2[i];
        shift += x.transpose() * y / s.sigma2[i];
    }
    gaussian_moments(&prec, &shift)
}

fn criterion_conditionals() -> Outcome {
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    let mut blocks = 0;
    for _ in 0..20 {
        let (s, p) = random_instance(&mut r);
        let mut check = |got: (DVector<f64>, DMatrix<f64>), want: (DVector<f64>, DMatrix<f64>)| {
            worst = worst.max(rel_err_vec(&got.0, &want.0)).max(rel_err(&got.1, &want.1));
            blocks += 1;
        };
        for i in 0..s.z.len() {
            check(loadings_conditional(&s, &p, i).moments().unwrap(), loadings_oracle(&s, &p, i));
        }
        for q in 0..p.q {
            check(time_factor_conditional(&s, &p, q, 1e-8).moments().unwrap(), time_factor_oracle(&s, &p, q));
        }
        for k in 0..p.r {
            check(age_factor_conditional(&s, &p, k, 1e-8).moments().unwrap(), age_factor_oracle(&s, &p, k));
        }
    }
    outcome("1", worst < 1e-8, format!("closed-form conditionals vs dense designs: {blocks} blocks, max rel err {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 2. scalar updates against analytic moments

const SCALAR_DRAWS: usize = 100_000;

/// z-score of a sample mean against a known mean and variance.
fn mean_z(xs: &[f64], mean: f64, var: f64) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (m - mean) / (var / xs.len() as f64).sqrt()
}

fn sample_var(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

fn scalar_state(f_t: &[f64], f_a: &[f64], kappa: f64) -> ModelState {
    let (t, a) = (f_t.len(), f_a.len());
    ModelState {
        z: vec![DMatrix::zeros(t, a)],
        f_t: DMatrix::from_column_slice(t, 1, f_t),
        f_a: DMatrix::from_column_slice(a, 1, f_a),
        lambda: vec![DMatrix::zeros(1, 1)],
        kappa: vec![kappa],
        tau_t: vec![0.7],
        tau_a: vec![1.0],
        sigma2: vec![1.0],
    }
}

fn criterion_scalar_moments() -> Outcome {
    let mut r = rng(202);
    let prior = PriorSpec::new(1, 1);
    let mut zs: Vec<(&str, f64)> = Vec::new();

    // drift: N(mean of first differences, τ/(T-1))
    let path = [0.3, 0.9, 0.7, 1.8, 2.1, 2.0];
    let mut s = scalar_state(&path, &[0.0, 1.0], 0.0);
    let want_mean = path.windows(2).map(|w| w[1] - w[0]).sum::<f64>() / 5.0;
    let want_var = 0.7 / 5.0;
    let draws: Vec<f64> = (0..SCALAR_DRAWS)
        .map(|_| {
            update_drift(&mut s, &prior, 0, &mut r);
            s.kappa[0]
        })
        .collect();
    zs.push(("drift mean", mean_z(&draws, want_mean, want_var)));
    zs.push(("drift variance", (sample_var(&draws) - want_var) / (want_var * (2.0 / (SCALAR_DRAWS as f64 - 1.0)).sqrt())));

    // τ_T with f = (0, 2, 2), κ = 0: shape 1, scale ½((2-0)² + (2-2)²) = 2, so 1/τ ~ Gamma(1, rate 2).
    // τ_A with a five-point path: IG(2, ½Σ(Δf)²).
    let f_a: [f64; 5] = [0.0, 0.5, 1.5, 1.0, 2.0];
    let scale_a = 0.5 * f_a.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>();
    let mut s = scalar_state(&[0.0, 2.0, 2.0], &f_a, 0.0);
    let (mut prec_t, mut prec_a) = (Vec::new(), Vec::new());
    for _ in 0..SCALAR_DRAWS {
        update_smoothing_variances(&mut s, &prior, &mut r);
        prec_t.push(1.0 / s.tau_t[0]);
        prec_a.push(1.0 / s.tau_a[0]);
    }
    zs.push(("1/tau_T mean", mean_z(&prec_t, 1.0 / 2.0, 1.0 / 4.0)));
    zs.push(("1/tau_A mean", mean_z(&prec_a, 2.0 / scale_a, 2.0 / (scale_a * scale_a))));

    // a longer time path gives shape 3.5, where τ itself has finite variance
    let long: [f64; 8] = [0.0, 0.4, 0.1, 0.9, 1.1, 0.8, 1.6, 2.2];
    let kappa = 0.25;
    let scale_t = 0.5 * long.windows(2).map(|w| (w[1] - w[0] - kappa).powi(2)).sum::<f64>();
    let shape_t = 3.5;
    let mut s = scalar_state(&long, &f_a, kappa);
    let taus: Vec<f64> = (0..SCALAR_DRAWS)
        .map(|_| {
            update_smoothing_variances(&mut s, &prior, &mut r);
            s.tau_t[0]
        })
        .collect();
    let ig_mean = scale_t / (shape_t - 1.0);
    let ig_var = ig_mean * ig_mean / (shape_t - 2.0);
    zs.push(("tau_T mean (shape 3.5)", mean_z(&taus, ig_mean, ig_var)));

    // σ²: c0 = 2.5, C0 = 1.5, one cell with residual 1 → IG(3, 2)
    let one = CountPanel::from_counts((1, 1, 1), vec![0], vec![1.0]).unwrap();
    let mut s = ModelState {
        z: vec![DMatrix::from_element(1, 1, 1.0)],
        f_t: DMatrix::zeros(1, 1),
        f_a: DMatrix::zeros(1, 1),
        lambda: vec![DMatrix::zeros(1, 1)],
        kappa: vec![0.0],
        tau_t: vec![1.0],
        tau_a: vec![1.0],
        sigma2: vec![1.0],
    };
    let draws: Vec<f64> = (0..SCALAR_DRAWS)
        .map(|_| {
            update_noise_variances(&mut s, &one, &prior, &mut r);
            s.sigma2[0]
        })
        .collect();
    zs.push(("sigma2 mean IG(3,2)", mean_z(&draws, 1.0, 1.0)));

    // σ² on a partly masked 4×5 surface: only observed residuals count
    let (t, a) = (4, 5);
    let mask: Vec<bool> = (0..t * a).map(|k| k % 3 != 0).collect();
    let panel = CountPanel::from_counts((1, t, a), vec![1; t * a], vec![1.0; t * a]).unwrap().with_mask(mask.clone()).unwrap();
    let z = random_matrix(t, a, &mut r);
    let mut s = ModelState {
        z: vec![z.clone()],
        f_t: DMatrix::zeros(t, 1),
        f_a: DMatrix::zeros(a, 1),
        ..s
    };
    let (n_obs, ss) = (0..t)
        .flat_map(|tt| (0..a).map(move |x| (tt, x)))
        .filter(|&(tt, x)| mask[tt * a + x])
        .fold((0.0, 0.0), |(n, ss), (tt, x)| (n + 1.0, ss + z[(tt, x)].powi(2)));
    let (shape, scale) = (2.5 + n_obs / 2.0, 1.5 + ss / 2.0);
    let (mut s2, mut inv) = (Vec::new(), Vec::new());
    for _ in 0..SCALAR_DRAWS {
        update_noise_variances(&mut s, &panel, &prior, &mut r);
        s2.push(s.sigma2[0]);
        inv.push(1.0 / s.sigma2[0]);
    }
    let m = scale / (shape - 1.0);
    zs.push(("sigma2 mean (masked)", mean_z(&s2, m, m * m / (shape - 2.0))));
    zs.push(("1/sigma2 mean (masked)", mean_z(&inv, shape / scale, shape / (scale * scale))));

    let worst = zs.iter().map(|(_, z)| z.abs()).fold(0.0, f64::max);
    let list: Vec<String> = zs.iter().map(|(n, z)| format!("{n} {z:+.2}")).collect();
    outcome("2", worst < 3.0, format!("scalar moments over {SCALAR_DRAWS} draws, |z| max {worst:.2}: {}", list.join(", ")))
}

// ---------------------------------------------------------------------------
// 3. Geweke joint-distribution test

const GEWEKE_SWEEPS: usize = 20_000;
const GEWEKE_ADAPT: usize = 2_000;
const GEWEKE_OFFSET: f64 = 2.0;

fn geweke_prior() -> PriorSpec {
    let mut p = PriorSpec::new(1, 1);
    p.c0 = 6.0;
    p.big_c0 = 5.0;
    p.drift_variance = Some(0.25);
    p.time_level_precision = 1.0;
    p.age_level_precision = 1.0;
    p.tau_t_prior = ScalePrior::InverseGamma { shape: 6.0, scale: 2.5 };
    p.tau_a_prior = ScalePrior::InverseGamma { shape: 6.0, scale: 2.5 };
    p
}

/// Draw from `N(P⁻¹h·c, τ P⁻¹)` where `P = D'D + εI`.
fn rw_path(m: usize, eps: f64, tau: f64, kappa: f64, r: &mut impl Rng) -> DVector<f64> {
    let d = difference_matrix(m);
    let p = d.transpose() * &d + DMatrix::identity(m, m) * eps;
    let chol = p.clone().cholesky().unwrap();
    let mean = chol.solve(&(d.transpose() * DVector::from_element(m - 1, kappa)));
    // L L' = P, so L'⁻¹ e has covariance P⁻¹
    let e = DVector::from_fn(m, |_, _| normal(r));
    let l_t = chol.l().transpose();
    let noise = l_t.solve_upper_triangular(&e).unwrap();
    mean + noise * tau.sqrt()
}

fn prior_draw(p: &PriorSpec, n: usize, t: usize, a: usize, r: &mut impl Rng) -> ModelState {
    let ig = |sp: ScalePrior, r: &mut dyn rand::RngCore| match sp {
        ScalePrior::InverseGamma { shape, scale } => sample_inverse_gamma(shape, scale, r),
        ScalePrior::Jeffreys => unreachable!("Geweke prior is proper"),
    };
    let tau_t = ig(p.tau_t_prior, r);
    let tau_a = ig(p.tau_a_prior, r);
    let kappa = p.drift_variance.unwrap().sqrt() * normal(r);
    let f_t = rw_path(t, p.time_level_precision, tau_t, kappa, r);
    let f_a = rw_path(a, p.age_level_precision, tau_a, 0.0, r);
    let lambda: Vec<DMatrix<f64>> = (0..n).map(|_| DMatrix::from_element(1, 1, normal(r))).collect();
    let sigma2: Vec<f64> = (0..n).map(|_| sample_inverse_gamma(p.c0, p.big_c0, r)).collect();
    let f_t = DMatrix::from_column_slice(t, 1, f_t.as_slice());
    let f_a = DMatrix::from_column_slice(a, 1, f_a.as_slice());
    let z = (0..n)
        .map(|i| {
            let m = &f_t * &lambda[i] * f_a.transpose();
            m.map(|v| v + sigma2[i].sqrt() * normal(r))
        })
        .collect();
    ModelState { z, f_t, f_a, lambda, kappa: vec![kappa], tau_t: vec![tau_t], tau_a: vec![tau_a], sigma2 }
}

fn draw_counts(s: &ModelState, r: &mut impl Rng) -> CountPanel {
    let (n, t, a) = (s.z.len(), s.f_t.nrows(), s.f_a.nrows());
    let mut counts = Vec::with_capacity(n * t * a);
    for z in &s.z {
        for tt in 0..t {
            for x in 0..a {
                counts.push(sample_poisson(GEWEKE_OFFSET * z[(tt, x)].exp(), r));
            }
        }
    }
    CountPanel::from_counts((n, t, a), counts, vec![GEWEKE_OFFSET; n * t * a]).unwrap()
}

const GEWEKE_NAMES: [&str; 10] = ["sigma2_1", "sigma2_2", "tau_T", "tau_A", "kappa", "z_1(0,0)", "z_2(3,3)", "lambda_1", "lambda_2", "m_1(0,0)"];

fn geweke_values(s: &ModelState) -> [f64; 10] {
    [
        s.sigma2[0],
        s.sigma2[1],
        s.tau_t[0],
        s.tau_a[0],
        s.kappa[0],
        s.z[0][(0, 0)],
        s.z[1][(3, 3)],
        s.lambda[0][(0, 0)],
        s.lambda[1][(0, 0)],
        s.f_t[(0, 0)] * s.lambda[0][(0, 0)] * s.f_a[(0, 0)],
    ]
}

/// Mean and batch-means standard error.
fn batch_mean_se(xs: &[f64], batches: usize) -> (f64, f64) {
    let len = xs.len() / batches;
    let means: Vec<f64> = xs.chunks(len).take(batches).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let v = means.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (m, (v / batches as f64).sqrt())
}

fn criterion_geweke() -> Outcome {
    let (n, t, a) = (2, 4, 4);
    let prior = geweke_prior();
    let mut r = rng(303);

    // marginal-conditional: independent draws of the parameters from the prior
    let forward: Vec<[f64; 10]> = (0..GEWEKE_SWEEPS).map(|_| geweke_values(&prior_draw(&prior, n, t, a, &mut r))).collect();

    // successive-conditional: alternate y | θ and one Gibbs sweep θ | y
    let start = prior_draw(&prior, n, t, a, &mut r);
    let panel = draw_counts(&start, &mut r);
    let config = SamplerConfig {
        n_iterations: GEWEKE_ADAPT + GEWEKE_SWEEPS,
        n_burnin: GEWEKE_ADAPT,
        seed: 304,
        track_predictive: false,
        ..SamplerConfig::default()
    };
    let mut chain = Chain::new(&panel, &prior, &config, Init::State(start)).unwrap();
    let mut successive = Vec::with_capacity(GEWEKE_SWEEPS);
    for sweep in 0..GEWEKE_ADAPT + GEWEKE_SWEEPS {
        let panel = draw_counts(chain.state(), &mut r);
        chain.set_counts(&panel).unwrap();
        if let Err(e) = chain.step() {
            return outcome("3", false, format!("Geweke sweep {sweep} failed: {e}"));
        }
        if sweep >= GEWEKE_ADAPT {
            successive.push(geweke_values(chain.state()));
        }
    }

    let mut stats = Vec::with_capacity(20);
    for (k, name) in GEWEKE_NAMES.iter().enumerate() {
        for (power, label) in [(1, "mean"), (2, "second moment")] {
            let f: Vec<f64> = forward.iter().map(|v| v[k].powi(power)).collect();
            let s: Vec<f64> = successive.iter().map(|v| v[k].powi(power)).collect();
            let (mf, sef) = batch_mean_se(&f, 50);
            let (ms, ses) = batch_mean_se(&s, 50);
            stats.push((format!("{name} {label}"), (ms - mf) / (sef * sef + ses * ses).sqrt()));
        }
    }
    let worst = stats.iter().map(|(_, z)| z.abs()).fold(0.0, f64::max);
    let argmax = stats.iter().max_by(|x, y| x.1.abs().total_cmp(&y.1.abs())).map(|s| s.0.clone()).unwrap();
    outcome(
        "3",
        worst < 4.0,
        format!("Geweke test, {} statistics over {GEWEKE_SWEEPS} sweeps: max |z| {worst:.2} ({argmax})", stats.len()),
    )
}

// ---------------------------------------------------------------------------
// 4. simulation recovery

fn criterion_recovery() -> Vec<(Outcome, Duration)> {
    let mut out = Vec::new();
    let clock = Instant::now();
    let cfg = SimConfig::default();
    let (panel, truth) = simulate_panel(&cfg).unwrap();
    let sampler = SamplerConfig::default();
    let store = run_chain(&panel, &PriorSpec::new(cfg.q, cfg.r), &sampler, Init::Auto).unwrap();
    let rep = recovery_report(&truth, &store, &panel).unwrap();
    let elapsed = clock.elapsed();
    let budget = elapsed < Duration::from_secs(2 * 3600);
    let label = format!(
        "N={} T={} A={} Q=R={}, {} iterations ({} burn-in, thin {})",
        cfg.n, cfg.t, cfg.a, cfg.q, sampler.n_iterations, sampler.n_burnin, sampler.thin
    );
    out.push((
        outcome("4a", rep.fitted_correlation > 0.95 && budget, format!("fitted-surface correlation {:.4} > 0.95; {label}", rep.fitted_correlation)),
        elapsed,
    ));
    let covered = rep.sigma2_covered();
    out.push((
        outcome("4b", covered >= 42, format!("sigma2 95% intervals cover truth for {covered}/{} populations (need 42) at c0=2.5, C0=1.5", rep.sigma2.len())),
        Duration::ZERO,
    ));
    let corrs: Vec<f64> = rep.time_factor_correlations.iter().chain(&rep.age_factor_correlations).copied().collect();
    let min_corr = corrs.iter().copied().fold(f64::INFINITY, f64::min);
    out.push((
        outcome(
            "4c",
            min_corr > 0.9 && corrs.len() == cfg.q + cfg.r,
            format!(
                "HOSVD |corr| time {:?} age {:?}, min {min_corr:.4} > 0.9",
                round3(&rep.time_factor_correlations),
                round3(&rep.age_factor_correlations)
            ),
        ),
        Duration::ZERO,
    ));

    // the same design with the noise-variance prior matched to the generator
    let clock = Instant::now();
    let mut matched = PriorSpec::new(cfg.q, cfg.r);
    (matched.c0, matched.big_c0) = cfg.sigma2_prior;
    let short = SamplerConfig { n_iterations: 6_000, n_burnin: 2_000, thin: 4, track_predictive: false, ..SamplerConfig::default() };
    let store = run_chain(&panel, &matched, &short, Init::Auto).unwrap();
    let rep_m = recovery_report(&truth, &store, &panel).unwrap();
    println!(
        "INFO [4b] with c0={}, C0={} (the generating prior), {} iterations: sigma2 covered for {}/{} populations ({:.1}s)",
        matched.c0,
        matched.big_c0,
        short.n_iterations,
        rep_m.sigma2_covered(),
        rep_m.sigma2.len(),
        clock.elapsed().as_secs_f64()
    );

    let clock = Instant::now();
    let cfg = SimConfig::reduced();
    let (panel, truth) = simulate_panel(&cfg).unwrap();
    let sampler = SamplerConfig { n_iterations: 6_500, n_burnin: 1_500, thin: 1, ..SamplerConfig::default() };
    let store = run_chain(&panel, &PriorSpec::new(cfg.q, cfg.r), &sampler, Init::Auto).unwrap();
    let rep = recovery_report(&truth, &store, &panel).unwrap();
    let elapsed = clock.elapsed();
    out.push((
        outcome(
            "4-reduced",
            rep.fitted_correlation > 0.9 && elapsed < Duration::from_secs(600),
            format!(
                "reduced preset N={} T={} A={}, {} draws: fitted-surface correlation {:.4} > 0.9",
                cfg.n,
                cfg.t,
                cfg.a,
                store.n_draws(),
                rep.fitted_correlation
            ),
        ),
        elapsed,
    ));
    out
}

fn round3(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}

// ---------------------------------------------------------------------------
// 5. benchmark oracles

fn panel_from(n: usize, t: usize, a: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> LogPanel {
    let mut v = Vec::with_capacity(n * t * a);
    for i in 0..n {
        for tt in 0..t {
            for x in 0..a {
                v.push(f(i, tt, x));
            }
        }
    }
    LogPanel::from_values((n, t, a), v).unwrap()
}

/// Row-centred, row-scaled copy (sample sd, unit divisor for flat rows).
fn oracle_standardize(d: &DMatrix<f64>) -> DMatrix<f64> {
    let m = d.ncols() as f64;
    DMatrix::from_fn(d.nrows(), d.ncols(), |i, j| {
        let row = d.row(i);
        let mean = row.sum() / m;
        let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
        (d[(i, j)] - mean) / if sd < 1e-12 { 1.0 } else { sd }
    })
}

/// Leading `k` eigenvectors of `S'S`.
fn oracle_right_vectors(s: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(s.transpose() * s);
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    DMatrix::from_fn(s.ncols(), k, |row, c| eig.eigenvectors[(row, idx[c])])
}

fn oracle_rw_drift(path: &[f64], h: usize) -> f64 {
    let diffs: Vec<f64> = path.windows(2).map(|w| w[1] - w[0]).collect();
    let mean_step = diffs.iter().sum::<f64>() / diffs.len() as f64;
    path[path.len() - 1] + h as f64 * mean_step
}

/// Normal-equation regression of each row of `series` on `[1 | F]`, then
/// the regression evaluated at the drift-extrapolated factors.
fn oracle_time_block(series: &DMatrix<f64>, f: &DMatrix<f64>, h: usize) -> DVector<f64> {
    let (t, k) = f.shape();
    let x = DMatrix::from_fn(t, k + 1, |r, c| if c == 0 { 1.0 } else { f[(r, c - 1)] });
    let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
    let mut future = DVector::from_element(k + 1, 1.0);
    for c in 0..k {
        let path: Vec<f64> = f.column(c).iter().copied().collect();
        future[c + 1] = oracle_rw_drift(&path, h);
    }
    DVector::from_fn(series.nrows(), |row, _| {
        let y = series.row(row).transpose();
        let coef = &xtx_inv * x.transpose() * y;
        coef.dot(&future)
    })
}

fn oracle_time_factorization(p: &LogPanel, q: usize, joint: bool, h: usize) -> DMatrix<f64> {
    let (n, t, a) = p.dims();
    let mut out = DMatrix::zeros(n, a);
    if joint {
        let stacked = DMatrix::from_fn(a * n, t, |row, tt| p.value(row / a, tt, row % a));
        let fc = oracle_time_block(&stacked, &oracle_right_vectors(&oracle_standardize(&stacked), q), h);
        for row in 0..a * n {
            out[(row / a, row % a)] = fc[row];
        }
    } else {
        for i in 0..n {
            let d = p.matrix(i).transpose();
            let fc = oracle_time_block(&d, &oracle_right_vectors(&oracle_standardize(&d), q), h);
            out.set_row(i, &fc.transpose());
        }
    }
    out
}

fn oracle_age_factorization(p: &LogPanel, r: usize, joint: bool, h: usize) -> DMatrix<f64> {
    let (n, t, a) = p.dims();
    let shared = DMatrix::from_fn(t * n, a, |row, x| p.value(row / t, row % t, x));
    let shared_f = oracle_right_vectors(&oracle_standardize(&shared), r);
    let mut out = DMatrix::zeros(n, a);
    for i in 0..n {
        let y = p.matrix(i);
        let f = if joint { shared_f.clone() } else { oracle_right_vectors(&oracle_standardize(&y), r) };
        let alpha = y.sum() / (t * a) as f64;
        let ftf_inv = (f.transpose() * &f).try_inverse().unwrap();
        let beta = &ftf_inv * f.transpose() * y.transpose().map(|v| v - alpha); // r × t
        let b_future = DVector::from_fn(r, |k, _| {
            let path: Vec<f64> = beta.row(k).iter().copied().collect();
            oracle_rw_drift(&path, h)
        });
        out.set_row(i, &(&f * b_future).map(|v| v + alpha).transpose());
    }
    out
}

fn criterion_benchmarks() -> Outcome {
    let mut r = rng(505);
    let mut notes = Vec::new();
    let mut ok = true;

    // random walks on dyadic values, where every route to the answer is exact
    let mut rw_exact = true;
    for _ in 0..50 {
        let (n, t, a) = (2, r.random_range(2..=12), 5);
        let p = panel_from(n, t, a, |_, _, _| r.random_range(-64..64) as f64 / 8.0);
        for h in [1, 3, 5] {
            let plain = BenchmarkSpec::new(BenchmarkKind::Rw, 0).unwrap().forecast(&p, h).unwrap();
            let drift = BenchmarkSpec::new(BenchmarkKind::RwDrift, 0).unwrap().forecast(&p, h).unwrap();
            for i in 0..n {
                for x in 0..a {
                    let path: Vec<f64> = (0..t).map(|tt| p.value(i, tt, x)).collect();
                    rw_exact &= plain[(i, x)] == path[t - 1];
                    rw_exact &= drift[(i, x)] == oracle_rw_drift(&path, h);
                }
            }
        }
    }
    rw_exact &= rw_forecast(&[1.0, 2.0, 4.0], 2, false).unwrap() == 4.0;
    rw_exact &= rw_forecast(&[1.0, 2.0, 4.0], 2, true).unwrap() == 7.0;
    ok &= rw_exact;
    notes.push(format!("random walks exact: {rw_exact}"));

    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (n, t, a) = (3, 8, 6);
        let p = panel_from(n, t, a, |_, _, _| r.random_range(0.0..4.0));
        for k in 1..=3 {
            for joint in [false, true] {
                for h in [1, 5] {
                    let pairs = [
                        (time_factorization_fit(&p, k, joint, h).unwrap().1, oracle_time_factorization(&p, k, joint, h)),
                        (age_factorization_fit(&p, k, joint, h).unwrap().1, oracle_age_factorization(&p, k, joint, h)),
                    ];
                    for (got, want) in pairs {
                        let err = got.iter().zip(want.iter()).map(|(g, w)| (g - w).abs() / w.abs().max(1.0)).fold(0.0, f64::max);
                        worst = worst.max(err);
                    }
                }
            }
        }
    }
    ok &= worst < 1e-8;
    notes.push(format!("factorization pipelines max rel err {worst:.2e} (< 1e-8)"));

    let mut recon: f64 = 0.0;
    for _ in 0..10 {
        let (n, t, a) = (2, 6, 5);
        let p = panel_from(n, t, a, |_, _, _| r.random_range(0.0..4.0));
        let (time_fit, _) = time_factorization_fit(&p, t, false, 1).unwrap();
        let (age_fit, _) = age_factorization_fit(&p, a, false, 1).unwrap();
        for i in 0..n {
            recon = recon.max((&time_fit[i] - p.matrix(i)).amax()).max((&age_fit[i] - p.matrix(i)).amax());
        }
    }
    ok &= recon < 1e-10;
    notes.push(format!("full-rank reconstruction max abs err {recon:.2e} (< 1e-10)"));
    outcome("5", ok, format!("benchmark oracles: {}", notes.join("; ")))
}

// ---------------------------------------------------------------------------
// 6. forecast ordering against the no-drift random walk

const ORDERING_REPS: u64 = 10;
const HOLDOUT: usize = 5;

fn rmse(pairs: &[(f64, f64)]) -> f64 {
    (pairs.iter().map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pairs.len() as f64).sqrt()
}

fn criterion_ordering() -> Outcome {
    let mut wins = [0; 2];
    let mut lines = Vec::new();
    for rep in 0..ORDERING_REPS {
        let cfg = SimConfig { seed: 600 + rep, ..SimConfig::default() };
        let (panel, _) = simulate_panel(&cfg).unwrap();
        let (n, t, a) = panel.dims();
        let end = t - HOLDOUT;
        let train = panel.time_slice(0, end).unwrap();
        let sampler = SamplerConfig {
            n_iterations: 3_000,
            n_burnin: 1_000,
            thin: 2,
            seed: 700 + rep,
            track_predictive: false,
            ..SamplerConfig::default()
        };
        let store = run_chain(&train, &PriorSpec::new(cfg.q, cfg.r), &sampler, Init::Auto).unwrap();
        let horizons = [1, HOLDOUT];
        let targets: Vec<ForecastTarget> = horizons
            .iter()
            .flat_map(|&h| (0..n).flat_map(move |i| (0..a).map(move |x| (i, h, x))))
            .map(|(i, h, x)| ForecastTarget { i, h, x, y: panel.count(i, end + h - 1, x) })
            .collect();
        let opts = ForecastOptions { horizon: HOLDOUT, seed: sampler.seed, ..ForecastOptions::default() };
        let scores = forecast_scores(&store, &train, &targets, &opts).unwrap();
        let logs = to_log_panel(&train);
        let mut line = Vec::new();
        for (k, &h) in horizons.iter().enumerate() {
            let rw = BenchmarkSpec::new(BenchmarkKind::Rw, 0).unwrap().forecast(&logs, h).unwrap();
            let truth = |g: &ForecastTarget| (g.y as f64).ln_1p();
            let (mut bayes, mut walk) = (Vec::new(), Vec::new());
            for (g, s) in targets.iter().zip(&scores).filter(|(g, _)| g.h == h) {
                bayes.push((truth(g), s.log1p_mean));
                walk.push((truth(g), rw[(g.i, g.x)]));
            }
            let (rb, rw) = (rmse(&bayes), rmse(&walk));
            wins[k] += (rb < rw) as usize;
            line.push(format!("h{h} {rb:.3}/{rw:.3}"));
        }
        lines.push(line.join(" "));
    }
    let need = 9;
    outcome(
        "6",
        wins.iter().all(|&w| w >= need),
        format!(
            "Bayesian RMSE < random-walk RMSE in {}/{ORDERING_REPS} (h=1) and {}/{ORDERING_REPS} (h={HOLDOUT}) replications, need {need}; per replication bayes/rw: [{}]",
            wins[0],
            wins[1],
            lines.join("; ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. parameter counts

fn criterion_parameter_counts() -> Outcome {
    let got = count_parameters(188, 6, 8, 96, 22);
    outcome("7", got == (9_212, 33_276, 108_476), format!("count_parameters(188, 6, 8, 96, 22) = {got:?}"))
}

// ---------------------------------------------------------------------------
// 8. property suites

const TRIALS: usize = 1_000;

fn property_kronecker(r: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (t, a, q, rr) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=3), r.random_range(1..=3));
        let f_t = random_matrix(t, q, r);
        let f_a = random_matrix(a, rr, r);
        let x = DMatrix::from_fn(t * a, q * rr, |row, col| f_t[(row % t, col % q)] * f_a[(row / t, col / q)]);
        let naive = x.transpose() * &x;
        let fast = (f_a.transpose() * &f_a).kronecker(&(f_t.transpose() * &f_t));
        worst = worst.max(rel_err(&fast, &naive));

        // the loadings conditional uses the fast path; strip the prior and σ² back out
        let sigma2 = r.random_range(0.2..2.0);
        let s = ModelState {
            z: vec![random_matrix(t, a, r)],
            f_t,
            f_a,
            lambda: vec![DMatrix::zeros(q, rr)],
            kappa: vec![0.0; q],
            tau_t: vec![1.0; q],
            tau_a: vec![1.0; rr],
            sigma2: vec![sigma2],
        };
        let cond = loadings_conditional(&s, &PriorSpec::new(q, rr), 0);
        let implied = (cond.precision - DMatrix::identity(q * rr, q * rr)) * sigma2;
        worst = worst.max(rel_err(&implied, &naive));
    }
    worst
}

fn property_spectrum(r: &mut ChaCha8Rng) -> (bool, String) {
    let mut ok = true;
    let (mut max_zero, mut min_second, mut max_dev) = (0.0f64, f64::INFINITY, 0.0f64);
    for _ in 0..TRIALS {
        let m = r.random_range(2..=200);
        let omega = build_rw_precision(m).unwrap().matrix;
        let eig = SymmetricEigen::new(omega);
        let mut idx: Vec<usize> = (0..m).collect();
        idx.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
        let zero = eig.eigenvalues[idx[0]].abs();
        let second = eig.eigenvalues[idx[1]];
        let v = eig.eigenvectors.column(idx[0]);
        let target = v[0].signum() / (m as f64).sqrt();
        let dev = v.iter().map(|x| (x - target).abs()).fold(0.0, f64::max);
        max_zero = max_zero.max(zero);
        min_second = min_second.min(second);
        max_dev = max_dev.max(dev);
        ok &= zero < 1e-10 && second > 0.0 && dev < 1e-8;
    }
    (ok, format!("Omega spectrum: max |lambda_min| {max_zero:.1e}, min lambda_2 {min_second:.2e}, null vector dev {max_dev:.1e}"))
}

fn property_icar(r: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let a = r.random_range(2..=40);
        let f: Vec<f64> = (0..a).map(|_| normal(r)).collect();
        let x = r.random_range(0..a);
        let tau = r.random_range(0.01..5.0);
        let omega = build_rw_precision(a).unwrap().matrix;
        // density ∝ exp(-f'Ωf / 2τ): conditional precision Ω_xx/τ, mean -Σ_{j≠x} Ω_xj f_j / Ω_xx
        let oxx = omega[(x, x)];
        let mean = -(0..a).filter(|&j| j != x).map(|j| omega[(x, j)] * f[j]).sum::<f64>() / oxx;
        let var = tau / oxx;
        let (m, v) = icar_conditional(&f, x, tau);
        worst = worst.max((m - mean).abs()).max((v - var).abs());
    }
    worst
}

fn property_lps(r: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let y = r.random_range(0..200u64);
        let offset = r.random_range(0.5..50.0);
        let draws: Vec<f64> = (0..r.random_range(1..=300)).map(|_| r.random_range(-2.0..4.0)).collect();
        let lls: Vec<f64> = draws.iter().map(|&z| poisson_loglik_cell(y, offset, z)).collect();
        let top = lls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let c = top + r.random_range(-5.0..5.0);
        let shifted = (lls.iter().map(|l| (l - c).exp()).sum::<f64>() / lls.len() as f64).ln() + c;
        let got = log_predictive_score(y, offset, &draws).unwrap();
        let mut stream = LogMeanExp::default();
        lls.iter().for_each(|&l| stream.push(l));
        let scale = got.abs().max(1.0);
        worst = worst.max((got - shifted).abs() / scale).max((stream.value() - got).abs() / scale);
    }
    worst
}

fn property_centering(r: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..TRIALS {
        let (n, t, a) = (r.random_range(1..=5), r.random_range(1..=8), r.random_range(1..=8));
        let slices: Vec<DMatrix<f64>> = (0..n).map(|_| random_matrix(t, a, r).add_scalar(r.random_range(-5.0..5.0))).collect();
        let (once, _) = center_fitted_array(&slices);
        let (twice, means) = center_fitted_array(&once);
        for (x, y) in once.iter().zip(&twice) {
            worst = worst.max((x - y).amax());
        }
        worst = worst.max(means.iter().map(|m| m.abs()).fold(0.0, f64::max));
    }
    worst
}

fn property_hosvd(r: &mut ChaCha8Rng) -> (bool, String) {
    let mut worst: f64 = 0.0;
    let mut shares_ok = true;
    for _ in 0..TRIALS {
        let (n, t, a) = (r.random_range(1..=5), r.random_range(2..=10), r.random_range(2..=10));
        let (q, rr) = (r.random_range(1..=t), r.random_range(1..=a));
        let slices: Vec<DMatrix<f64>> = (0..n).map(|_| random_matrix(t, a, r)).collect();
        let (centered, _) = center_fitted_array(&slices);
        let modes = hosvd_modes(&centered, q, rr).unwrap();
        for m in [&modes.time, &modes.age] {
            let k = m.ncols();
            worst = worst.max((m.transpose() * m - DMatrix::identity(k, k)).amax());
        }
        for s in [&modes.time_shares, &modes.age_shares] {
            shares_ok &= s.windows(2).all(|w| w[0] >= w[1]) && s.iter().sum::<f64>() <= 1.0 + 1e-12;
        }
    }
    (worst < 1e-10 && shares_ok, format!("HOSVD orthogonality max dev {worst:.1e}, shares ordered and sum <= 1: {shares_ok}"))
}

fn criterion_properties() -> Outcome {
    let mut r = rng(808);
    let kron = property_kronecker(&mut r);
    let (spec_ok, spec_note) = property_spectrum(&mut r);
    let icar = property_icar(&mut r);
    let lps = property_lps(&mut r);
    let center = property_centering(&mut r);
    let (hosvd_ok, hosvd_note) = property_hosvd(&mut r);
    let ok = kron < 1e-10 && spec_ok && icar < 1e-12 && lps < 1e-12 && center < 1e-12 && hosvd_ok;
    outcome(
        "8",
        ok,
        format!(
            "{TRIALS} trials each: Kronecker identity {kron:.1e}; {spec_note}; ICAR conditional {icar:.1e}; LPS shift {lps:.1e}; centering idempotence {center:.1e}; {hosvd_note}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let mut results: Vec<Outcome> = Vec::new();
    let mut run = |f: fn() -> Outcome, budget: Option<Duration>| {
        let clock = Instant::now();
        let mut o = f();
        let elapsed = clock.elapsed();
        if let Some(b) = budget.filter(|b| elapsed > *b) {
            o.pass = false;
            o.detail.push_str(&format!("; over the {}s budget", b.as_secs()));
        }
        report(&o, elapsed);
        results.push(o);
    };
    run(criterion_conditionals, Some(Duration::from_secs(10)));
    run(criterion_scalar_moments, Some(Duration::from_secs(30)));
    run(criterion_geweke, Some(Duration::from_secs(300)));
    run(criterion_benchmarks, None);
    run(criterion_parameter_counts, None);
    run(criterion_properties, None);
    run(criterion_ordering, None);
    for (o, elapsed) in criterion_recovery() {
        report(&o, elapsed);
        results.push(o);
    }

    let failed: Vec<&str> = results.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    let unexpected: Vec<&str> = failed.iter().copied().filter(|id| !KNOWN_SHORTFALLS.contains(id)).collect();
    println!(
        "acceptance: {} of {} criteria passed; failed: {:?}; unexpected failures: {:?}",
        results.len() - failed.len(),
        results.len(),
        failed,
        unexpected
    );
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
