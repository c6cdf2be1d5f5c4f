//! Full conditionals of the Gaussian layer (everything given `Z`).
//!
//! Each block has a `*_conditional` function returning the closed-form
//! posterior and an `update_*` function that draws from it. The chain driver
//! calls the `*_with` variants, which reuse cached residuals `Z_i - F_TΛ_iF_A'`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{sample_canonical_dense, SymTridiagonal};
use crate::priors::{drift_canonical_shift, drift_quadratic_coefficient, rw_tridiagonal, PriorSpec};
use crate::stats::sample_inverse_gamma;

use super::state::ModelState;

/// Loading energy below which a factor's likelihood precision counts as absent.
pub const DEGENERACY_THRESHOLD: f64 = 1e-12;

/// Floor applied to a smoothing variance whose posterior scale is zero.
pub const TAU_FLOOR: f64 = 1e-10;

/// Gaussian in canonical form: density ∝ exp(-x'Px/2 + x'h).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianConditional {
    pub precision: DMatrix<f64>,
    pub shift: DVector<f64>,
}

impl GaussianConditional {
    /// `(mean, covariance)`.
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let chol = self.precision.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite {
            block: "gaussian".into(),
            detail: "cholesky failed".into(),
        })?;
        Ok((chol.solve(&self.shift), chol.inverse()))
    }

    pub fn sample<R: Rng + ?Sized>(&self, block: &str, rng: &mut R) -> Result<DVector<f64>> {
        let chol = self.precision.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite {
            block: block.into(),
            detail: format!("min diagonal {:.3e}", self.precision.diagonal().min()),
        })?;
        Ok(sample_canonical_dense(&chol, &self.shift, rng))
    }
}

/// Gaussian with tridiagonal precision, the shape of every factor conditional.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedConditional {
    pub precision: SymTridiagonal,
    pub shift: Vec<f64>,
    /// True when the likelihood carried no information and the ridge was added.
    pub degenerate: bool,
}

impl BandedConditional {
    pub fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        GaussianConditional {
            precision: self.precision.to_dense(),
            shift: DVector::from_column_slice(&self.shift),
        }
        .moments()
    }

    pub fn sample<R: Rng + ?Sized>(&self, block: &str, rng: &mut R) -> Result<Vec<f64>> {
        let chol = self.precision.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
            block: block.into(),
            detail: "banded cholesky failed".into(),
        })?;
        Ok(chol.sample_canonical(&self.shift, rng))
    }
}

// ---------------------------------------------------------------------------
// loadings

/// Conditional of `vec(Λ_i)` (column-major, `q` fastest).
///
/// The design cross-product `(F_A⊗F_T)'(F_A⊗F_T)` is formed as
/// `(F_A'F_A)⊗(F_T'F_T)` from the two small Gram matrices.
pub fn loadings_conditional(state: &ModelState, prior: &PriorSpec, i: usize) -> GaussianConditional {
    let gt = state.f_t.transpose() * &state.f_t;
    let ga = state.f_a.transpose() * &state.f_a;
    loadings_conditional_with(state, prior, i, &gt, &ga)
}

pub(crate) fn loadings_conditional_with(
    state: &ModelState,
    prior: &PriorSpec,
    i: usize,
    gram_t: &DMatrix<f64>,
    gram_a: &DMatrix<f64>,
) -> GaussianConditional {
    let (q, r) = (state.f_t.ncols(), state.f_a.ncols());
    let inv_s2 = 1.0 / state.sigma2[i];
    let mut precision = gram_a.kronecker(gram_t) * inv_s2;
    for rr in 0..r {
        for qq in 0..q {
            let k = rr * q + qq;
            precision[(k, k)] += 1.0 / prior.loading_variance(i, qq, rr);
        }
    }
    let proj = state.f_t.transpose() * &state.z[i] * &state.f_a;
    let shift = DVector::from_column_slice(proj.as_slice()) * inv_s2;
    GaussianConditional { precision, shift }
}

pub fn update_loadings<R: Rng + ?Sized>(
    state: &mut ModelState,
    prior: &PriorSpec,
    i: usize,
    rng: &mut R,
) -> Result<()> {
    let cond = loadings_conditional(state, prior, i);
    let v = cond.sample("loadings", rng)?;
    let (q, r) = (state.f_t.ncols(), state.f_a.ncols());
    state.lambda[i] = DMatrix::from_column_slice(q, r, v.as_slice());
    Ok(())
}

// ---------------------------------------------------------------------------
// factors

fn residuals(state: &ModelState) -> Vec<DMatrix<f64>> {
    (0..state.z.len()).map(|i| state.residual(i)).collect()
}

fn finish_banded(mut precision: SymTridiagonal, shift: Vec<f64>, energy: f64, ridge: f64) -> BandedConditional {
    let degenerate = energy < DEGENERACY_THRESHOLD;
    if degenerate {
        precision.diag.iter_mut().for_each(|d| *d += ridge);
    }
    BandedConditional {
        precision,
        shift,
        degenerate,
    }
}

/// Conditional of time factor column `q`: precision `(Ω_T + ε_T I)/τ_{T,q} +
/// Σ_i w_i'w_i/σ²_i · I` with `w_i = F_A λ_{i,q,·}'`, shift `h_{0,q} + Σ_i Z̃_i w_i/σ²_i`.
pub fn time_factor_conditional(state: &ModelState, prior: &PriorSpec, q: usize, ridge: f64) -> BandedConditional {
    time_factor_conditional_with(state, prior, q, ridge, &residuals(state))
}

pub(crate) fn time_factor_conditional_with(
    state: &ModelState,
    prior: &PriorSpec,
    q: usize,
    ridge: f64,
    resid: &[DMatrix<f64>],
) -> BandedConditional {
    let t = state.f_t.nrows();
    let tau = state.tau_t[q];
    let f_q = state.f_t.column(q);
    let mut shift: Vec<f64> = drift_canonical_shift(state.kappa[q], tau, t).as_slice().to_vec();
    let mut energy = 0.0;
    for (i, res) in resid.iter().enumerate() {
        let w = &state.f_a * state.lambda[i].row(q).transpose();
        let ww = w.norm_squared();
        let inv_s2 = 1.0 / state.sigma2[i];
        energy += ww * inv_s2;
        let rw = res * &w;
        for k in 0..t {
            shift[k] += (rw[k] + f_q[k] * ww) * inv_s2;
        }
    }
    let mut precision = rw_tridiagonal(t, prior.time_level_precision);
    precision.diag.iter_mut().for_each(|d| *d = *d / tau + energy);
    precision.off.iter_mut().for_each(|o| *o /= tau);
    finish_banded(precision, shift, energy, ridge)
}

/// Conditional of age factor column `r`: precision `(Ω_A + ε_A I)/τ_{A,r} +
/// Σ_i v_i'v_i/σ²_i · I` with `v_i = F_T λ_{i,·,r}`, shift `Σ_i Z̃_i' v_i/σ²_i`.
pub fn age_factor_conditional(state: &ModelState, prior: &PriorSpec, r: usize, ridge: f64) -> BandedConditional {
    age_factor_conditional_with(state, prior, r, ridge, &residuals(state))
}

pub(crate) fn age_factor_conditional_with(
    state: &ModelState,
    prior: &PriorSpec,
    r: usize,
    ridge: f64,
    resid: &[DMatrix<f64>],
) -> BandedConditional {
    let a = state.f_a.nrows();
    let tau = state.tau_a[r];
    let f_r = state.f_a.column(r);
    let mut shift = vec![0.0; a];
    let mut energy = 0.0;
    for (i, res) in resid.iter().enumerate() {
        let v = &state.f_t * state.lambda[i].column(r);
        let vv = v.norm_squared();
        let inv_s2 = 1.0 / state.sigma2[i];
        energy += vv * inv_s2;
        let rv = res.tr_mul(&v);
        for k in 0..a {
            shift[k] += (rv[k] + f_r[k] * vv) * inv_s2;
        }
    }
    let mut precision = rw_tridiagonal(a, prior.age_level_precision);
    precision.diag.iter_mut().for_each(|d| *d = *d / tau + energy);
    precision.off.iter_mut().for_each(|o| *o /= tau);
    finish_banded(precision, shift, energy, ridge)
}

/// Draws time factor `q`; returns whether the degeneracy ridge was used.
pub fn update_time_factor<R: Rng + ?Sized>(
    state: &mut ModelState,
    prior: &PriorSpec,
    q: usize,
    ridge: f64,
    rng: &mut R,
) -> Result<bool> {
    let mut resid = residuals(state);
    update_time_factor_with(state, prior, q, ridge, &mut resid, rng)
}

pub(crate) fn update_time_factor_with<R: Rng + ?Sized>(
    state: &mut ModelState,
    prior: &PriorSpec,
    q: usize,
    ridge: f64,
    resid: &mut [DMatrix<f64>],
    rng: &mut R,
) -> Result<bool> {
    let cond = time_factor_conditional_with(state, prior, q, ridge, resid);
    let new = cond.sample("time factor", rng)?;
    let delta = DVector::from_fn(new.len(), |k, _| new[k] - state.f_t[(k, q)]);
    for (i, res) in resid.iter_mut().enumerate() {
        let w = &state.f_a * state.lambda[i].row(q).transpose();
        res.ger(-1.0, &delta, &w, 1.0);
    }
    state.f_t.set_column(q, &DVector::from_vec(new));
    Ok(cond.degenerate)
}

/// Draws age factor `r`; returns whether the degeneracy ridge was used.
pub fn update_age_factor<R: Rng + ?Sized>(
    state: &mut ModelState,
    prior: &PriorSpec,
    r: usize,
    ridge: f64,
    rng: &mut R,
) -> Result<bool> {
    let mut resid = residuals(state);
    update_age_factor_with(state, prior, r, ridge, &mut resid, rng)
}

pub(crate) fn update_age_factor_with<R: Rng + ?Sized>(
    state: &mut ModelState,
    prior: &PriorSpec,
    r: usize,
    ridge: f64,
    resid: &mut [DMatrix<f64>],
    rng: &mut R,
) -> Result<bool> {
    let cond = age_factor_conditional_with(state, prior, r, ridge, resid);
    let new = cond.sample("age factor", rng)?;
    let delta = DVector::from_fn(new.len(), |k, _| new[k] - state.f_a[(k, r)]);
    for (i, res) in resid.iter_mut().enumerate() {
        let v = &state.f_t * state.lambda[i].column(r);
        res.ger(-1.0, &v, &delta, 1.0);
    }
    state.f_a.set_column(r, &DVector::from_vec(new));
    Ok(cond.degenerate)
}

// ---------------------------------------------------------------------------
// scalars

/// `(mean, variance)` of κ_q given the time factor path.
pub fn drift_conditional(state: &ModelState, prior: &PriorSpec, q: usize) -> (f64, f64) {
    let t = state.f_t.nrows();
    let tau = state.tau_t[q];
    let c = drift_quadratic_coefficient(t, prior.time_level_precision);
    let prec = c / tau + prior.drift_variance.map_or(0.0, |v| 1.0 / v);
    let shift = (state.f_t[(t - 1, q)] - state.f_t[(0, q)]) / tau;
    (shift / prec, 1.0 / prec)
}

pub fn update_drift<R: Rng + ?Sized>(state: &mut ModelState, prior: &PriorSpec, q: usize, rng: &mut R) {
    let (m, v) = drift_conditional(state, prior, q);
    let e: f64 = StandardNormal.sample(rng);
    state.kappa[q] = m + v.sqrt() * e;
}

/// Inverse-gamma `(shape, scale)` of τ_{T,q}.
pub fn time_smoothing_conditional(state: &ModelState, prior: &PriorSpec, q: usize) -> (f64, f64) {
    let t = state.f_t.nrows();
    let f = state.f_t.column(q);
    let kappa = state.kappa[q];
    let eps = prior.time_level_precision;
    let (a0, b0) = prior.tau_t_prior.ig_parts();
    let mut quad: f64 = (1..t).map(|k| (f[k] - f[k - 1] - kappa).powi(2)).sum();
    let rank = if eps > 0.0 {
        quad += eps * f.norm_squared() + kappa * kappa * (drift_quadratic_coefficient(t, eps) - (t - 1) as f64);
        t
    } else {
        t - 1
    };
    (a0 + 0.5 * rank as f64, b0 + 0.5 * quad)
}

/// Inverse-gamma `(shape, scale)` of τ_{A,r}.
pub fn age_smoothing_conditional(state: &ModelState, prior: &PriorSpec, r: usize) -> (f64, f64) {
    let a = state.f_a.nrows();
    let f = state.f_a.column(r);
    let eps = prior.age_level_precision;
    let (a0, b0) = prior.tau_a_prior.ig_parts();
    let mut quad: f64 = (1..a).map(|k| (f[k] - f[k - 1]).powi(2)).sum();
    let rank = if eps > 0.0 {
        quad += eps * f.norm_squared();
        a
    } else {
        a - 1
    };
    (a0 + 0.5 * rank as f64, b0 + 0.5 * quad)
}

fn draw_tau<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> (f64, bool) {
    if !(scale > 0.0) || !(shape > 0.0) {
        return (TAU_FLOOR, true);
    }
    let v = sample_inverse_gamma(shape, scale, rng);
    if v < TAU_FLOOR {
        (TAU_FLOOR, true)
    } else {
        (v, false)
    }
}

/// Draws every τ_{T,q} then every τ_{A,r}; returns how many hit the floor.
pub fn update_smoothing_variances<R: Rng + ?Sized>(state: &mut ModelState, prior: &PriorSpec, rng: &mut R) -> usize {
    let mut floored = 0;
    for q in 0..state.tau_t.len() {
        let (shape, scale) = time_smoothing_conditional(state, prior, q);
        let (v, f) = draw_tau(shape, scale, rng);
        state.tau_t[q] = v;
        floored += f as usize;
    }
    for r in 0..state.tau_a.len() {
        let (shape, scale) = age_smoothing_conditional(state, prior, r);
        let (v, f) = draw_tau(shape, scale, rng);
        state.tau_a[r] = v;
        floored += f as usize;
    }
    if floored > 0 {
        log::debug!("{floored} smoothing variance(s) floored at {TAU_FLOOR:e}");
    }
    floored
}

/// Inverse-gamma `(shape, scale)` of σ²_i from the residual over observed
/// cells; `observed` is column-major over the `T×A` grid.
pub fn noise_conditional_from(
    prior: &PriorSpec,
    residual: &DMatrix<f64>,
    observed: &[bool],
) -> (f64, f64) {
    let mut n = 0usize;
    let mut ss = 0.0;
    for (e, &o) in residual.iter().zip(observed) {
        if o {
            n += 1;
            ss += e * e;
        }
    }
    (prior.c0 + 0.5 * n as f64, prior.big_c0 + 0.5 * ss)
}

pub fn noise_conditional(
    state: &ModelState,
    panel: &crate::data::CountPanel,
    prior: &PriorSpec,
    i: usize,
) -> (f64, f64) {
    let (_, t, a) = panel.dims();
    let observed: Vec<bool> = (0..a).flat_map(|x| (0..t).map(move |tt| (tt, x))).map(|(tt, x)| panel.is_observed(i, tt, x)).collect();
    noise_conditional_from(prior, &state.residual(i), &observed)
}

pub fn update_noise_variances<R: Rng + ?Sized>(
    state: &mut ModelState,
    panel: &crate::data::CountPanel,
    prior: &PriorSpec,
    rng: &mut R,
) {
    for i in 0..state.sigma2.len() {
        let (shape, scale) = noise_conditional(state, panel, prior, i);
        state.sigma2[i] = sample_inverse_gamma(shape, scale, rng);
    }
}
