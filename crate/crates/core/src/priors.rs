//! Prior hyperparameters and the first-order random-walk / ICAR precision
//! structure.
//!
//! The defaults reproduce the improper reference priors: Jeffreys priors on the
//! smoothing variances, a flat prior on drifts and on the initial time-factor
//! level, and an intrinsic ICAR prior on age factors. Every improper piece has a
//! proper counterpart (inverse-gamma, Gaussian, level precision `ε`); the proper
//! variants exist so the full joint can be simulated forward, which is what a
//! joint-distribution sampler check needs.

use nalgebra::{DMatrix, DVector};

use crate::config::KeyValues;
use crate::error::{invalid, Error, Result};
use crate::linalg::SymTridiagonal;

/// Prior on a smoothing variance τ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalePrior {
    /// p(τ) ∝ 1/τ
    Jeffreys,
    InverseGamma { shape: f64, scale: f64 },
}

impl ScalePrior {
    /// `(shape, scale)` added to the conjugate update; Jeffreys is IG(0, 0).
    pub fn ig_parts(&self) -> (f64, f64) {
        match *self {
            ScalePrior::Jeffreys => (0.0, 0.0),
            ScalePrior::InverseGamma { shape, scale } => (shape, scale),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "jeffreys" {
            return Ok(Self::Jeffreys);
        }
        if let Some(rest) = s.strip_prefix("ig:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() == 2 {
                let shape = parts[0].trim().parse().map_err(|_| Error::Parse(s.into()))?;
                let scale = parts[1].trim().parse().map_err(|_| Error::Parse(s.into()))?;
                return Ok(Self::InverseGamma { shape, scale });
            }
        }
        Err(Error::Parse(format!("scale prior `{s}`: expected `jeffreys` or `ig:<shape>,<scale>`")))
    }

    fn render(&self) -> String {
        match self {
            Self::Jeffreys => "jeffreys".into(),
            Self::InverseGamma { shape, scale } => format!("ig:{shape},{scale}"),
        }
    }
}

/// Diagonal prior variances for `vec(Λ_i)`.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadingVariance {
    Scalar(f64),
    /// One entry per `(i, q, r)`, laid out `i`-major then `vec` order (`q` fastest).
    PerElement(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    /// Number of time factors.
    pub q: usize,
    /// Number of age factors.
    pub r: usize,
    /// IG shape for σ²_i.
    pub c0: f64,
    /// IG scale for σ²_i.
    pub big_c0: f64,
    pub loading_variance: LoadingVariance,
    /// `None`: flat prior on κ_q. `Some(v)`: κ_q ~ N(0, v).
    pub drift_variance: Option<f64>,
    /// Level precision ε_T added to Ω_T (0 = flat prior on the initial level).
    pub time_level_precision: f64,
    /// Level precision ε_A added to Ω_A (0 = intrinsic ICAR).
    pub age_level_precision: f64,
    pub tau_t_prior: ScalePrior,
    pub tau_a_prior: ScalePrior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self::new(1, 1)
    }
}

const PRIOR_KEYS: &[&str] = &[
    "q",
    "r",
    "c0",
    "C0",
    "L0",
    "drift_prior",
    "time_level_prior",
    "age_level_prior",
    "tau_t_prior",
    "tau_a_prior",
];

impl PriorSpec {
    pub fn new(q: usize, r: usize) -> Self {
        Self {
            q,
            r,
            c0: 2.5,
            big_c0: 1.5,
            loading_variance: LoadingVariance::Scalar(1.0),
            drift_variance: None,
            time_level_precision: 0.0,
            age_level_precision: 0.0,
            tau_t_prior: ScalePrior::Jeffreys,
            tau_a_prior: ScalePrior::Jeffreys,
        }
    }

    pub fn validate(&self, n_pop: usize) -> Result<()> {
        if self.q == 0 || self.r == 0 {
            return invalid("q and r must be at least 1");
        }
        if !(self.c0 > 0.0 && self.big_c0 > 0.0) {
            return invalid("c0 and C0 must be positive");
        }
        match &self.loading_variance {
            LoadingVariance::Scalar(v) if !(*v > 0.0) => return invalid("L0 must be positive"),
            LoadingVariance::PerElement(v) => {
                if v.len() != n_pop * self.q * self.r {
                    return invalid("per-element L0 must have N*Q*R entries");
                }
                if v.iter().any(|x| !(*x > 0.0)) {
                    return invalid("L0 entries must be positive");
                }
            }
            _ => {}
        }
        if let Some(v) = self.drift_variance {
            if !(v > 0.0) {
                return invalid("drift variance must be positive");
            }
        }
        if self.time_level_precision < 0.0 || self.age_level_precision < 0.0 {
            return invalid("level precisions must be non-negative");
        }
        for p in [self.tau_t_prior, self.tau_a_prior] {
            if let ScalePrior::InverseGamma { shape, scale } = p {
                if !(shape > 0.0 && scale > 0.0) {
                    return invalid("inverse-gamma hyperparameters must be positive");
                }
            }
        }
        Ok(())
    }

    /// Prior variance of λ_{i,q,r}.
    #[inline]
    pub fn loading_variance(&self, i: usize, q: usize, r: usize) -> f64 {
        match &self.loading_variance {
            LoadingVariance::Scalar(v) => *v,
            LoadingVariance::PerElement(v) => v[(i * self.r + r) * self.q + q],
        }
    }

    /// Whether every component is proper, so the joint prior can be sampled.
    pub fn is_proper(&self) -> bool {
        self.drift_variance.is_some()
            && self.time_level_precision > 0.0
            && self.age_level_precision > 0.0
            && matches!(self.tau_t_prior, ScalePrior::InverseGamma { .. })
            && matches!(self.tau_a_prior, ScalePrior::InverseGamma { .. })
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(PRIOR_KEYS)?;
        let mut p = Self::new(kv.get_or("q", 1)?, kv.get_or("r", 1)?);
        p.c0 = kv.get_or("c0", p.c0)?;
        p.big_c0 = kv.get_or("C0", p.big_c0)?;
        if let Some(v) = kv.get::<f64>("L0")? {
            p.loading_variance = LoadingVariance::Scalar(v);
        }
        if let Some(s) = kv.get_str("drift_prior") {
            p.drift_variance = match s {
                "flat" => None,
                _ => Some(
                    s.strip_prefix("normal:")
                        .and_then(|v| v.trim().parse().ok())
                        .ok_or_else(|| Error::Parse(format!("drift_prior `{s}`")))?,
                ),
            };
        }
        p.time_level_precision = parse_level(kv.get_str("time_level_prior"), "flat")?;
        p.age_level_precision = parse_level(kv.get_str("age_level_prior"), "intrinsic")?;
        if let Some(s) = kv.get_str("tau_t_prior") {
            p.tau_t_prior = ScalePrior::parse(s)?;
        }
        if let Some(s) = kv.get_str("tau_a_prior") {
            p.tau_a_prior = ScalePrior::parse(s)?;
        }
        Ok(p)
    }

    /// Scalar-L0 specs only; per-element variances are not representable as text.
    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("q", self.q);
        kv.set("r", self.r);
        kv.set("c0", self.c0);
        kv.set("C0", self.big_c0);
        if let LoadingVariance::Scalar(v) = self.loading_variance {
            kv.set("L0", v);
        }
        kv.set(
            "drift_prior",
            match self.drift_variance {
                None => "flat".to_string(),
                Some(v) => format!("normal:{v}"),
            },
        );
        kv.set("time_level_prior", render_level(self.time_level_precision, "flat"));
        kv.set("age_level_prior", render_level(self.age_level_precision, "intrinsic"));
        kv.set("tau_t_prior", self.tau_t_prior.render());
        kv.set("tau_a_prior", self.tau_a_prior.render());
        kv
    }
}

fn parse_level(s: Option<&str>, improper: &str) -> Result<f64> {
    match s {
        None => Ok(0.0),
        Some(s) if s == improper => Ok(0.0),
        Some(s) => s
            .strip_prefix("precision:")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("level prior `{s}`: expected `{improper}` or `precision:<eps>`"))),
    }
}

fn render_level(eps: f64, improper: &str) -> String {
    if eps == 0.0 {
        improper.to_string()
    } else {
        format!("precision:{eps}")
    }
}

/// First-order random-walk precision `Ω_M = D'D` on a chain of length M:
/// diagonal `(1, 2, …, 2, 1)`, off-diagonals `-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RwPrecision {
    pub dim: usize,
    pub matrix: DMatrix<f64>,
}

impl RwPrecision {
    /// Banded form of `Ω_M + ε I`.
    pub fn tridiagonal(&self, eps: f64) -> SymTridiagonal {
        rw_tridiagonal(self.dim, eps)
    }
}

pub fn build_rw_precision(m: usize) -> Result<RwPrecision> {
    if m < 2 {
        return invalid(format!("random-walk precision needs M >= 2, got {m}"));
    }
    Ok(RwPrecision {
        dim: m,
        matrix: rw_tridiagonal(m, 0.0).to_dense(),
    })
}

pub(crate) fn rw_tridiagonal(m: usize, eps: f64) -> SymTridiagonal {
    let diag = (0..m)
        .map(|k| if m == 1 { 0.0 } else if k == 0 || k + 1 == m { 1.0 } else { 2.0 } + eps)
        .collect();
    SymTridiagonal::new(diag, vec![-1.0; m.saturating_sub(1)])
}

/// ICAR full conditional of `f[x]` given its neighbours (0-based `x`):
/// mean of the neighbour values and variance `tau / n_x`.
pub fn icar_conditional(f: &[f64], x: usize, tau: f64) -> (f64, f64) {
    let a = f.len();
    assert!(a >= 2 && x < a, "ICAR needs A >= 2 and x < A");
    let mut sum = 0.0;
    let mut n = 0.0;
    if x > 0 {
        sum += f[x - 1];
        n += 1.0;
    }
    if x + 1 < a {
        sum += f[x + 1];
        n += 1.0;
    }
    (sum / n, tau / n)
}

/// Canonical-mean contribution of the random-walk-with-drift prior,
/// `(κ/τ)·D'1 = (κ/τ)·(-1, 0, …, 0, 1)'`.
pub fn drift_canonical_shift(kappa: f64, tau: f64, t: usize) -> DVector<f64> {
    let mut h = DVector::zeros(t);
    if t >= 2 {
        h[0] = -kappa / tau;
        h[t - 1] = kappa / tau;
    }
    h
}

/// `1'D (Ω_T + εI)^{-1} D'1`, the drift's quadratic coefficient in the
/// normalized time-factor prior; equals `T-1` for the intrinsic prior.
pub fn drift_quadratic_coefficient(t: usize, eps: f64) -> f64 {
    if eps == 0.0 {
        return (t - 1) as f64;
    }
    let mut d1 = vec![0.0; t];
    d1[0] = -1.0;
    d1[t - 1] = 1.0;
    let chol = rw_tridiagonal(t, eps).cholesky().expect("Ω + εI is SPD for ε > 0");
    let s = chol.solve(&d1);
    s[t - 1] - s[0]
}
