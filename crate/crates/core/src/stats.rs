//! Small numeric helpers shared across modules.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance (divisor n-1); zero for fewer than two values.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Linear-interpolation quantile of unsorted data (R type 7).
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, p)
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    if a.len() < 2 {
        return None;
    }
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn ln_factorial(y: u64) -> f64 {
    statrs::function::factorial::ln_factorial(y)
}

/// Draw from IG(shape, scale), i.e. 1/Gamma(shape, rate = scale).
pub fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / scale).expect("inverse-gamma parameters must be positive");
    1.0 / g.sample(rng)
}

/// Poisson draw that tolerates a zero intensity.
pub fn sample_poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).expect("finite positive intensity").sample(rng) as u64
}

/// Welford accumulator of mean and variance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunningMoments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample variance; zero until two values have been pushed.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn from_parts(n: u64, mean: f64, variance: f64) -> Self {
        let m2 = if n < 2 { 0.0 } else { variance * (n - 1) as f64 };
        Self { n, mean, m2 }
    }
}

/// Running `log(mean(exp(x)))` over a stream of log-values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogMeanExp {
    n: u64,
    max: f64,
    /// `Σ exp(x - max)`
    scaled: f64,
}

impl Default for LogMeanExp {
    fn default() -> Self {
        Self { n: 0, max: f64::NEG_INFINITY, scaled: 0.0 }
    }
}

impl LogMeanExp {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        if x == f64::NEG_INFINITY {
            return;
        }
        if x > self.max {
            self.scaled = self.scaled * (self.max - x).exp() + 1.0;
            self.max = x;
        } else {
            self.scaled += (x - self.max).exp();
        }
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// `−∞` when empty or when every value was `−∞`.
    pub fn value(&self) -> f64 {
        if self.n == 0 || self.max == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        self.max + self.scaled.ln() - (self.n as f64).ln()
    }
}
