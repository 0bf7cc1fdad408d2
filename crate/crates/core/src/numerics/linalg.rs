use super::NumericsError;
use crate::Real;
use serde::{Deserialize, Serialize};

/// Dense symmetric matrix stored in full row-major order.
///
/// Every mutation writes both `(i, j)` and `(j, i)`, so stored entries are
/// exactly symmetric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix<T> {
    dim: usize,
    entries: Vec<T>,
}

impl<T: Real> SymMatrix<T> {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "SymMatrix dimension must be at least 1");
        Self {
            dim,
            entries: vec![T::zero(); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.set(i, i, T::one());
        }
        m
    }

    pub fn from_diagonal(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    /// Builds a matrix from the upper triangle of `f(i, j)`, `i <= j`.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in i..dim {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Builds a matrix from rows, requiring exact symmetry.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NumericsError> {
        let dim = rows.len();
        if dim == 0 {
            return Err(NumericsError::DimensionMismatch {
                expected: 1,
                found: 0,
            });
        }
        for row in rows {
            if row.len() != dim {
                return Err(NumericsError::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
        }
        for i in 0..dim {
            for j in 0..i {
                if rows[i][j] != rows[j][i] {
                    return Err(NumericsError::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self {
            dim,
            entries: rows.iter().flatten().copied().collect(),
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.entries[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: T) {
        self.entries[i * self.dim + j] = value;
        self.entries[j * self.dim + i] = value;
    }

    /// Adds `value` to `(i, j)` and, off the diagonal, to `(j, i)`.
    #[inline]
    pub fn add_to(&mut self, i: usize, j: usize, value: T) {
        self.entries[i * self.dim + j] += value;
        if i != j {
            self.entries[j * self.dim + i] += value;
        }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        (0..self.dim).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            dim: self.dim,
            entries: self.entries.iter().map(|&v| v * factor).collect(),
        }
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(v.len(), self.dim, "vector length must match matrix dimension");
        (0..self.dim)
            .map(|i| dot(self.row(i), v))
            .collect()
    }

    /// The quadratic form `v' A v`.
    pub fn quad_form(&self, v: &[T]) -> T {
        dot(v, &self.mul_vec(v))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diagonal(&self) -> T {
        (0..self.dim)
            .map(|i| self.get(i, i).abs())
            .fold(T::zero(), T::max)
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn norm_inf<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

pub(crate) fn norm2<T: Real>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

/// Lower-triangular Cholesky factor `A = L L'`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    dim: usize,
    lower: Vec<T>,
}

impl<T: Real> Cholesky<T> {
    /// Factors `a`, failing when a pivot drops to `dim * eps * max|a_ii|`
    /// or below.
    pub fn factor(a: &SymMatrix<T>) -> Result<Self, NumericsError> {
        let n = a.dim();
        let threshold = T::idx(n) * T::epsilon() * a.max_abs_diagonal();
        let mut lower = vec![T::zero(); n * n];
        for j in 0..n {
            let mut pivot = a.get(j, j);
            for k in 0..j {
                pivot -= lower[j * n + k] * lower[j * n + k];
            }
            if !(pivot > threshold) || !pivot.is_finite() {
                return Err(NumericsError::NotPositiveDefinite {
                    index: j,
                    pivot: pivot.to_f64_lossy(),
                });
            }
            let diag = pivot.sqrt();
            lower[j * n + j] = diag;
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= lower[i * n + k] * lower[j * n + k];
                }
                lower[i * n + j] = s / diag;
            }
        }
        Ok(Self { dim: n, lower })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn l(&self, i: usize, j: usize) -> T {
        self.lower[i * self.dim + j]
    }

    /// Solves `L z = b`.
    pub fn forward_solve(&self, b: &[T]) -> Vec<T> {
        let n = self.dim;
        assert_eq!(b.len(), n);
        let mut z = b.to_vec();
        for i in 0..n {
            let mut s = z[i];
            for k in 0..i {
                s -= self.l(i, k) * z[k];
            }
            z[i] = s / self.l(i, i);
        }
        z
    }

    /// Solves `L' x = z`.
    pub fn backward_solve(&self, z: &[T]) -> Vec<T> {
        let n = self.dim;
        assert_eq!(z.len(), n);
        let mut x = z.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in (i + 1)..n {
                s -= self.l(k, i) * x[k];
            }
            x[i] = s / self.l(i, i);
        }
        x
    }

    /// Product `L z`.
    pub fn lower_mul(&self, z: &[T]) -> Vec<T> {
        assert_eq!(z.len(), self.dim);
        (0..self.dim)
            .map(|i| (0..=i).map(|k| self.l(i, k) * z[k]).sum())
            .collect()
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        self.backward_solve(&self.forward_solve(b))
    }

    pub fn inverse(&self) -> SymMatrix<T> {
        let n = self.dim;
        let mut inv = SymMatrix::zeros(n);
        let mut e = vec![T::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = T::zero());
            e[j] = T::one();
            let col = self.solve(&e);
            for (i, &v) in col.iter().enumerate().skip(j) {
                inv.set(i, j, v);
            }
        }
        inv
    }

    pub fn log_det(&self) -> T {
        (0..self.dim).map(|i| self.l(i, i).ln()).sum::<T>() * T::of(2.0)
    }
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn cholesky_solve<T: Real>(a: &SymMatrix<T>, b: &[T]) -> Result<Vec<T>, NumericsError> {
    if a.dim() != b.len() {
        return Err(NumericsError::DimensionMismatch {
            expected: a.dim(),
            found: b.len(),
        });
    }
    Ok(Cholesky::factor(a)?.solve(b))
}

/// Leading eigenvalue and unit eigenvector of a symmetric PSD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EigPair<T> {
    pub value: T,
    pub vector: Vec<T>,
    pub iterations: usize,
}

/// Power iteration cap used by [`max_eigpair`].
pub const POWER_ITERATION_CAP: usize = 200_000;

/// Largest eigenpair of a positive semidefinite matrix by power iteration.
///
/// Stops once `||A v - lambda v||_inf <= 1e-9 * lambda` with `lambda` the
/// Rayleigh quotient of `v`. The start vector is a fixed low-discrepancy
/// sequence, so results are reproducible. The returned vector has its
/// first nonzero component positive.
pub fn max_eigpair<T: Real>(a: &SymMatrix<T>) -> Result<EigPair<T>, NumericsError> {
    let n = a.dim();
    let scale = (0..n)
        .flat_map(|i| a.row(i).iter().copied())
        .fold(T::zero(), |m, v| m.max(v.abs()));
    if scale == T::zero() {
        let mut e = vec![T::zero(); n];
        e[0] = T::one();
        return Ok(EigPair {
            value: T::zero(),
            vector: e,
            iterations: 0,
        });
    }
    let tol = T::of(1e-9).max(T::epsilon() * T::of(64.0));
    let golden = T::of(0.618_033_988_749_894_9);
    let mut v: Vec<T> = (0..n)
        .map(|i| {
            let t = T::idx(i + 1) * golden;
            T::one() + T::of(0.5) * (t - t.floor())
        })
        .collect();
    normalize(&mut v);
    let mut residual = T::infinity();
    for iteration in 1..=POWER_ITERATION_CAP {
        let w = a.mul_vec(&v);
        let lambda = dot(&v, &w);
        residual = w
            .iter()
            .zip(&v)
            .fold(T::zero(), |m, (&wi, &vi)| m.max((wi - lambda * vi).abs()));
        if lambda > T::zero() && residual <= tol * lambda {
            sign_normalize(&mut v);
            return Ok(EigPair {
                value: lambda,
                vector: v,
                iterations: iteration,
            });
        }
        let norm = norm2(&w);
        if !(norm > T::zero()) || !norm.is_finite() {
            break;
        }
        v = w.into_iter().map(|x| x / norm).collect();
    }
    Err(NumericsError::ConvergenceFailure {
        iterations: POWER_ITERATION_CAP,
        residual: residual.to_f64_lossy(),
    })
}

fn normalize<T: Real>(v: &mut [T]) {
    let n = norm2(v);
    v.iter_mut().for_each(|x| *x /= n);
}

fn sign_normalize<T: Real>(v: &mut [T]) {
    let cutoff = norm_inf(v) * T::epsilon() * T::of(16.0);
    if let Some(&first) = v.iter().find(|x| x.abs() > cutoff) {
        if first < T::zero() {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}
