//! Starting values from a two-step SVD + least-squares fit of the empirical
//! log intensities.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::CountPanel;
use crate::linalg::{lstsq_min_norm, ordered_svd};
use crate::priors::PriorSpec;

use super::state::ModelState;

const VARIANCE_FLOOR: f64 = 1e-6;

/// Empirical log intensities `log((y + 0.5)/O)`; masked cells take the mean of
/// the observed cells at the same age in the same population (or the
/// population mean, or `log 0.5` when nothing is observed).
pub fn empirical_log_intensity(panel: &CountPanel) -> Vec<DMatrix<f64>> {
    let (n, t, a) = panel.dims();
    (0..n)
        .map(|i| {
            let obs = |tt: usize, x: usize| panel.is_observed(i, tt, x);
            let raw = |tt: usize, x: usize| ((panel.count(i, tt, x) as f64 + 0.5) / panel.offset(i, tt, x)).ln();
            let (mut psum, mut pn) = (0.0, 0usize);
            for tt in 0..t {
                for x in 0..a {
                    if obs(tt, x) {
                        psum += raw(tt, x);
                        pn += 1;
                    }
                }
            }
            let pop_mean = if pn > 0 { psum / pn as f64 } else { 0.5f64.ln() };
            let age_mean: Vec<f64> = (0..a)
                .map(|x| {
                    let v: Vec<f64> = (0..t).filter(|&tt| obs(tt, x)).map(|tt| raw(tt, x)).collect();
                    if v.is_empty() {
                        pop_mean
                    } else {
                        v.iter().sum::<f64>() / v.len() as f64
                    }
                })
                .collect();
            DMatrix::from_fn(t, a, |tt, x| if obs(tt, x) { raw(tt, x) } else { age_mean[x] })
        })
        .collect()
}

/// Leading `k` left singular vectors of `m`, padded with small random columns
/// when `m` has fewer than `k` non-negligible singular values.
fn leading_basis<R: Rng + ?Sized>(m: &DMatrix<f64>, k: usize, what: &str, rng: &mut R) -> DMatrix<f64> {
    let svd = ordered_svd(m);
    let smax = svd.singular_values.first().copied().unwrap_or(0.0);
    let rank = svd.singular_values.iter().filter(|&&s| s > smax * 1e-10 && s > 0.0).count();
    if rank < k {
        log::warn!("{what}: only {rank} positive singular value(s) for {k} factor(s); padding with random columns");
    }
    DMatrix::from_fn(m.nrows(), k, |row, c| {
        if c < rank {
            svd.u[(row, c)]
        } else {
            0.01 * rng.sample::<f64, _>(StandardNormal)
        }
    })
}

/// Data-driven starting state.
pub fn initialize_auto<R: Rng + ?Sized>(panel: &CountPanel, prior: &PriorSpec, rng: &mut R) -> ModelState {
    let (n, t, a) = panel.dims();
    let (q, r) = (prior.q, prior.r);
    let z = empirical_log_intensity(panel);

    let time_mode = DMatrix::from_fn(t, a * n, |tt, col| z[col / a][(tt, col % a)]);
    let age_mode = DMatrix::from_fn(a, t * n, |x, col| z[col / t][(col % t, x)]);
    let mut f_t = leading_basis(&time_mode, q, "time mode", rng);
    let mut f_a = leading_basis(&age_mode, r, "age mode", rng);

    // Λ_i = argmin ||Z_i - F_T Λ F_A'||: two min-norm solves
    let mut lambda: Vec<DMatrix<f64>> = z
        .iter()
        .map(|zi| {
            let left = lstsq_min_norm(&f_t, zi); // Q×A
            lstsq_min_norm(&f_a, &left.transpose()).transpose()
        })
        .collect();

    // balance scale between factors and loadings so loadings are O(1)
    let total: f64 = lambda.iter().map(|l| l.norm_squared()).sum();
    let rms = (total / (n * q * r) as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        let s = rms.sqrt();
        f_t *= s;
        f_a *= s;
        lambda.iter_mut().for_each(|l| *l /= rms);
    }

    let kappa: Vec<f64> = (0..q)
        .map(|k| if t > 1 { (f_t[(t - 1, k)] - f_t[(0, k)]) / (t - 1) as f64 } else { 0.0 })
        .collect();
    let tau_t = (0..q)
        .map(|k| {
            let d: Vec<f64> = (1..t).map(|tt| f_t[(tt, k)] - f_t[(tt - 1, k)] - kappa[k]).collect();
            (d.iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64).max(VARIANCE_FLOOR)
        })
        .collect();
    let tau_a = (0..r)
        .map(|k| {
            let d: Vec<f64> = (1..a).map(|x| f_a[(x, k)] - f_a[(x - 1, k)]).collect();
            (d.iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64).max(VARIANCE_FLOOR)
        })
        .collect();

    let mut state = ModelState {
        z,
        f_t,
        f_a,
        lambda,
        kappa,
        tau_t,
        tau_a,
        sigma2: vec![1.0; n],
    };
    state.sigma2 = (0..n)
        .map(|i| {
            let res = state.residual(i);
            let (mut ss, mut m) = (0.0, 0usize);
            for tt in 0..t {
                for x in 0..a {
                    if panel.is_observed(i, tt, x) {
                        ss += res[(tt, x)].powi(2);
                        m += 1;
                    }
                }
            }
            (ss / m.max(1) as f64).max(VARIANCE_FLOOR)
        })
        .collect();
    state
}
