//! Dense and tridiagonal linear algebra used by the conditionals, the ex-post
//! decomposition and the benchmark pipelines.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// Symmetric tridiagonal matrix stored by its diagonal and first off-diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiagonal {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl SymTridiagonal {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Self {
        assert_eq!(off.len() + 1, diag.len().max(1));
        Self { diag, off }
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for k in 0..n {
            m[(k, k)] = self.diag[k];
        }
        for k in 0..self.off.len() {
            m[(k, k + 1)] = self.off[k];
            m[(k + 1, k)] = self.off[k];
        }
        m
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        (0..n)
            .map(|k| {
                let mut s = self.diag[k] * v[k];
                if k > 0 {
                    s += self.off[k - 1] * v[k - 1];
                }
                if k + 1 < n {
                    s += self.off[k] * v[k + 1];
                }
                s
            })
            .collect()
    }

    /// Banded Cholesky `A = L L'` with lower bidiagonal `L`; `None` if not SPD.
    pub fn cholesky(&self) -> Option<TridiagonalCholesky> {
        let n = self.dim();
        let mut diag = Vec::with_capacity(n);
        let mut sub = Vec::with_capacity(n.saturating_sub(1));
        for k in 0..n {
            let mut d = self.diag[k];
            if k > 0 {
                let m = self.off[k - 1] / diag[k - 1];
                sub.push(m);
                d -= m * m;
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            diag.push(d.sqrt());
        }
        Some(TridiagonalCholesky { diag, sub })
    }
}

#[derive(Debug, Clone)]
pub struct TridiagonalCholesky {
    diag: Vec<f64>,
    sub: Vec<f64>,
}

impl TridiagonalCholesky {
    fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut y = Vec::with_capacity(b.len());
        for k in 0..b.len() {
            let mut v = b[k];
            if k > 0 {
                v -= self.sub[k - 1] * y[k - 1];
            }
            y.push(v / self.diag[k]);
        }
        y
    }

    /// Solves `L' x = y`.
    fn backward(&self, y: &[f64]) -> Vec<f64> {
        let n = y.len();
        let mut x = vec![0.0; n];
        for k in (0..n).rev() {
            let mut v = y[k];
            if k + 1 < n {
                v -= self.sub[k] * x[k + 1];
            }
            x[k] = v / self.diag[k];
        }
        x
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.backward(&self.forward(b))
    }

    /// Draws from `N(A^{-1} shift, A^{-1})`.
    pub fn sample_canonical<R: Rng + ?Sized>(&self, shift: &[f64], rng: &mut R) -> Vec<f64> {
        let mean = self.solve(shift);
        let eps: Vec<f64> = (0..mean.len()).map(|_| rng.sample(StandardNormal)).collect();
        let noise = self.backward(&eps);
        mean.iter().zip(noise).map(|(m, e)| m + e).collect()
    }
}

/// Draws from `N(P^{-1} shift, P^{-1})` given a dense SPD precision `P`.
pub fn sample_canonical_dense<R: Rng + ?Sized>(
    chol: &Cholesky<f64, nalgebra::Dyn>,
    shift: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let mean = chol.solve(shift);
    let eps = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&eps)
        .expect("Cholesky factor has a positive diagonal");
    mean + noise
}

/// Singular vectors ordered by decreasing singular value.
#[derive(Debug, Clone)]
pub struct OrderedSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    pub v: DMatrix<f64>,
}

pub fn ordered_svd(m: &DMatrix<f64>) -> OrderedSvd {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let v = svd.v_t.expect("requested V'").transpose();
    let s: Vec<f64> = svd.singular_values.iter().copied().collect();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    OrderedSvd {
        u: DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]),
        singular_values: order.iter().map(|&k| s[k]).collect(),
        v: DMatrix::from_fn(v.nrows(), order.len(), |r, c| v[(r, order[c])]),
    }
}

/// First `k` columns of `basis`, completed to `k` orthonormal columns with
/// Gram-Schmidt against the unit vectors when `basis` is too narrow.
pub fn complete_orthonormal(basis: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = basis.nrows();
    assert!(k <= n, "cannot hold {k} orthonormal columns in dimension {n}");
    let mut cols: Vec<DVector<f64>> = (0..basis.ncols().min(k))
        .map(|c| basis.column(c).into_owned())
        .collect();
    let mut e = 0;
    while cols.len() < k {
        let mut v = DVector::from_fn(n, |r, _| if r == e { 1.0 } else { 0.0 });
        e += 1;
        for _ in 0..2 {
            for c in &cols {
                let d = c.dot(&v);
                v -= c * d;
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
    }
    DMatrix::from_columns(&cols)
}

/// Flip column signs so each column's largest-magnitude entry is positive.
pub fn normalize_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0.0f64;
        for &v in col.iter() {
            if v.abs() > best.abs() {
                best = v;
            }
        }
        if best < 0.0 {
            col.neg_mut();
        }
    }
}

/// Minimum-norm least squares solution of `x b ≈ y` via the pseudo-inverse.
pub fn lstsq_min_norm(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let eps = smax * 1e-12 * x.nrows().max(x.ncols()) as f64;
    svd.solve(y, eps.max(f64::MIN_POSITIVE))
        .expect("SVD was computed with U and V")
}
