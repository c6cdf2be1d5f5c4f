use nalgebra::DMatrix;

use crate::error::{invalid, Result};

/// Model dimensions `(N, T, A, Q, R)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub t: usize,
    pub a: usize,
    pub q: usize,
    pub r: usize,
}

/// One full parameter configuration of the model.
///
/// `z[i]` and the fitted means are `T×A`; `lambda[i]` is `Q×R`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub z: Vec<DMatrix<f64>>,
    pub f_t: DMatrix<f64>,
    pub f_a: DMatrix<f64>,
    pub lambda: Vec<DMatrix<f64>>,
    pub kappa: Vec<f64>,
    pub tau_t: Vec<f64>,
    pub tau_a: Vec<f64>,
    pub sigma2: Vec<f64>,
}

/// The parameters a forecast needs from one posterior draw (everything but `Z`).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorDraw {
    pub f_t: DMatrix<f64>,
    pub f_a: DMatrix<f64>,
    pub lambda: Vec<DMatrix<f64>>,
    pub kappa: Vec<f64>,
    pub tau_t: Vec<f64>,
    pub tau_a: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl FactorDraw {
    pub fn fitted_mean(&self, i: usize) -> DMatrix<f64> {
        &self.f_t * &self.lambda[i] * self.f_a.transpose()
    }
}

impl ModelState {
    pub fn dims(&self) -> Dims {
        Dims {
            n: self.z.len(),
            t: self.f_t.nrows(),
            a: self.f_a.nrows(),
            q: self.f_t.ncols(),
            r: self.f_a.ncols(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if self.z.iter().any(|z| z.shape() != (d.t, d.a)) {
            return invalid("latent surfaces must all be T×A");
        }
        if self.lambda.len() != d.n || self.lambda.iter().any(|l| l.shape() != (d.q, d.r)) {
            return invalid("loadings must be N matrices of shape Q×R");
        }
        if self.kappa.len() != d.q || self.tau_t.len() != d.q || self.tau_a.len() != d.r || self.sigma2.len() != d.n {
            return invalid("parameter vector lengths inconsistent with (N, Q, R)");
        }
        if self.tau_t.iter().chain(&self.tau_a).chain(&self.sigma2).any(|v| !(*v > 0.0)) {
            return invalid("variances must be strictly positive");
        }
        Ok(())
    }

    /// `F_T Λ_i F_A'`.
    pub fn fitted_mean(&self, i: usize) -> DMatrix<f64> {
        fitted_mean(self, i)
    }

    /// `Z_i - F_T Λ_i F_A'`.
    pub fn residual(&self, i: usize) -> DMatrix<f64> {
        &self.z[i] - self.fitted_mean(i)
    }

    pub fn to_factor_draw(&self) -> FactorDraw {
        FactorDraw {
            f_t: self.f_t.clone(),
            f_a: self.f_a.clone(),
            lambda: self.lambda.clone(),
            kappa: self.kappa.clone(),
            tau_t: self.tau_t.clone(),
            tau_a: self.tau_a.clone(),
            sigma2: self.sigma2.clone(),
        }
    }
}

pub fn fitted_mean(state: &ModelState, i: usize) -> DMatrix<f64> {
    (&state.f_t * &state.lambda[i]) * state.f_a.transpose()
}
