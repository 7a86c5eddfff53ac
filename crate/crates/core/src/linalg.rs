//! Row-major dense matrices for the handful of 1x1 to 3x3 objects the
//! filters need. Generic over [`Real`] so the same arithmetic runs on
//! floats and on tape variables.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn column(values: &[T]) -> Self {
        Self::from_rows(values.len(), 1, values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for c in 0..rhs.cols {
                let mut acc = T::zero();
                for k in 0..self.cols {
                    acc += self[(r, k)] * rhs[(k, c)];
                }
                out[(r, c)] = acc;
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|r| T::dot(self.row(r), v)).collect()
    }

    pub fn add(&self, rhs: &Self) -> Self {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    fn zip_with(&self, rhs: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        let half = T::from_f64(0.5);
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[(r, c)] = (self[(r, c)] + self[(c, r)]) * half;
            }
        }
        out
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Self> {
        assert_eq!(self.rows, self.cols, "inverse of non-square matrix");
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        let scale = self
            .data
            .iter()
            .map(|x| x.value().abs())
            .fold(0.0_f64, f64::max);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| {
                    a[(i, col)]
                        .value()
                        .abs()
                        .total_cmp(&a[(j, col)].value().abs())
                })
                .unwrap_or(col);
            let p = a[(pivot, col)];
            if p.value().abs() <= f64::EPSILON * scale.max(f64::MIN_POSITIVE) || p.value() == 0.0 {
                return Err(Error::Singular);
            }
            if pivot != col {
                for c in 0..n {
                    a.data.swap(pivot * n + c, col * n + c);
                    inv.data.swap(pivot * n + c, col * n + c);
                }
            }
            let p = a[(col, col)];
            for c in 0..n {
                a[(col, c)] = a[(col, c)] / p;
                inv[(col, c)] = inv[(col, c)] / p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[(r, col)];
                if f.value() == 0.0 {
                    continue;
                }
                for c in 0..n {
                    a[(r, c)] = a[(r, c)] - f * a[(col, c)];
                    inv[(r, c)] = inv[(r, c)] - f * inv[(col, c)];
                }
            }
        }
        Ok(inv)
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Smallest eigenvalue lower bound check for symmetric PSD matrices of
    /// size up to 3, via leading principal minors of `A + tol·I`.
    pub fn is_psd(&self, tol: f64) -> bool {
        let n = self.rows;
        let a = |r: usize, c: usize| self[(r, c)].value() + if r == c { tol } else { 0.0 };
        match n {
            0 => true,
            1 => a(0, 0) >= 0.0,
            2 => a(0, 0) >= 0.0 && a(1, 1) >= 0.0 && a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0) >= -tol,
            _ => {
                // Cholesky attempt on the shifted matrix.
                let mut l = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..=i {
                        let mut s = a(i, j);
                        for k in 0..j {
                            s -= l[i * n + k] * l[j * n + k];
                        }
                        if i == j {
                            if s < -tol {
                                return false;
                            }
                            l[i * n + i] = s.max(0.0).sqrt();
                        } else if l[j * n + j] > 0.0 {
                            l[i * n + j] = s / l[j * n + j];
                        }
                    }
                }
                true
            }
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        &self.data[r * self.cols + c]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[T]> = self.data.chunks(self.cols.max(1)).collect();
        write!(f, "Matrix{rows:?}")
    }
}
