//! Small dense linear algebra over [`Scalar`].
//!
//! Everything in the model is at most a few dozen rows wide, so a row-major
//! `Vec` with direct loops is all that is needed. Decompositions provided:
//! Cholesky, thin Householder QR and cyclic Jacobi for symmetric eigenproblems.

use std::ops::{Index, IndexMut};

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {index} = {value})")]
    NotPositiveDefinite { index: usize, value: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is rank deficient (column {0})")]
    RankDeficient(usize),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row-major data.
    pub fn from_row_slice(rows: usize, cols: usize, data: &[T]) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data has wrong length");
        Self { rows, cols, data: data.to_vec() }
    }

    pub fn from_diagonal(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul: inner dimensions differ");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let orow = other.row(k);
                let dst = out.row_mut(i);
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn tr_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "tr_matmul: row counts differ");
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                let dst = out.row_mut(i);
                for (d, &b) in dst.iter_mut().zip(brow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "matvec: dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v`.
    pub fn tr_matvec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.rows, v.len(), "tr_matvec: dimension mismatch");
        let mut out = vec![T::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    /// Sub-matrix picking the given rows and columns.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        Self::from_fn(rows.len(), cols.len(), |i, j| self[(rows[i], cols[j])])
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data.iter().zip(&other.data).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| U::lit(x.as_f64())).collect() }
    }

    /// Lower Cholesky factor `L` with `self = L Lᵀ`.
    pub fn cholesky(&self) -> Result<Self, LinalgError> {
        if !self.is_square() {
            return Err(LinalgError::Dimension(format!("cholesky of {}x{}", self.rows, self.cols)));
        }
        let n = self.rows;
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > T::zero()) {
                return Err(LinalgError::NotPositiveDefinite { index: j, value: d.as_f64() });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(l)
    }

    /// Thin Householder QR of an `m × n` matrix with `m ≥ n`.
    ///
    /// Returns `(Q, R)` with `Q` of size `m × n` having orthonormal columns and
    /// `R` upper triangular with a non-negative diagonal.
    pub fn thin_qr(&self) -> Result<(Self, Self), LinalgError> {
        let (m, n) = (self.rows, self.cols);
        if m < n {
            return Err(LinalgError::Dimension(format!("thin QR needs rows >= cols, got {m}x{n}")));
        }
        let mut a = self.clone();
        let mut vs: Vec<Vec<T>> = Vec::with_capacity(n);
        for j in 0..n {
            let norm = (j..m).map(|i| a[(i, j)] * a[(i, j)]).sum::<T>().sqrt();
            let mut v: Vec<T> = (j..m).map(|i| a[(i, j)]).collect();
            if norm == T::zero() {
                vs.push(vec![T::zero(); m - j]);
                continue;
            }
            let alpha = if v[0] >= T::zero() { -norm } else { norm };
            v[0] -= alpha;
            let vnorm2 = v.iter().map(|&x| x * x).sum::<T>();
            if vnorm2 > T::zero() {
                for c in j..n {
                    let s = (j..m).map(|i| v[i - j] * a[(i, c)]).sum::<T>();
                    let f = (s + s) / vnorm2;
                    for i in j..m {
                        let upd = f * v[i - j];
                        a[(i, c)] -= upd;
                    }
                }
            }
            vs.push(v);
        }
        let mut r = Self::from_fn(n, n, |i, j| if j >= i { a[(i, j)] } else { T::zero() });
        // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
        let mut q = Self::from_fn(m, n, |i, j| if i == j { T::one() } else { T::zero() });
        for j in (0..n).rev() {
            let v = &vs[j];
            let vnorm2 = v.iter().map(|&x| x * x).sum::<T>();
            if vnorm2 == T::zero() {
                continue;
            }
            for c in 0..n {
                let s = (j..m).map(|i| v[i - j] * q[(i, c)]).sum::<T>();
                let f = (s + s) / vnorm2;
                for i in j..m {
                    let upd = f * v[i - j];
                    q[(i, c)] -= upd;
                }
            }
        }
        for i in 0..n {
            if r[(i, i)] < T::zero() {
                for c in i..n {
                    r[(i, c)] = -r[(i, c)];
                }
                for row in 0..m {
                    q[(row, i)] = -q[(row, i)];
                }
            }
        }
        Ok((q, r))
    }

    /// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
    ///
    /// Eigenvalues are returned in descending order; column `k` of the
    /// returned matrix is the unit eigenvector for eigenvalue `k`.
    pub fn symmetric_eigen(&self) -> (Vec<T>, Self) {
        assert!(self.is_square(), "symmetric_eigen needs a square matrix");
        let n = self.rows;
        let mut a = self.clone();
        let mut v = Self::identity(n);
        let eps = T::epsilon();
        for _sweep in 0..100 {
            let mut off = T::zero();
            let mut scale = T::zero();
            for i in 0..n {
                scale += a[(i, i)] * a[(i, i)];
                for j in (i + 1)..n {
                    off += a[(i, j)] * a[(i, j)];
                }
            }
            if off <= eps * eps * (scale + off) || off == T::zero() {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a[(p, q)];
                    if apq == T::zero() {
                        continue;
                    }
                    let app = a[(p, p)];
                    let aqq = a[(q, q)];
                    let theta = (aqq - app) / (apq + apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let t = if theta == T::zero() { T::one() } else { t };
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = c * vkp - s * vkq;
                        v[(k, q)] = s * vkp + c * vkq;
                    }
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));
        let values = order.iter().map(|&i| a[(i, i)]).collect();
        let vectors = Self::from_fn(n, n, |r, c| v[(r, order[c])]);
        (values, vectors)
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `log det` of a symmetric positive definite matrix from its Cholesky factor.
pub fn log_det_spd<T: Scalar>(m: &Matrix<T>) -> Result<T, LinalgError> {
    let l = m.cholesky()?;
    Ok(l.diagonal().into_iter().map(|d| d.ln()).sum::<T>() * T::lit(2.0))
}

/// A factor `A` with `A Aᵀ = Σ` for a symmetric positive semi-definite `Σ`,
/// from its eigendecomposition (negative eigenvalues are clamped to zero).
pub fn psd_factor<T: Scalar>(sigma: &Matrix<T>) -> Matrix<T> {
    let (vals, vecs) = sigma.symmetric_eigen();
    let k = vals.len();
    Matrix::from_fn(k, k, |i, j| vecs[(i, j)] * vals[j].max(T::zero()).sqrt())
}

/// Inverse of an upper triangular matrix with non-zero diagonal.
pub fn invert_upper<T: Scalar>(r: &Matrix<T>) -> Result<Matrix<T>, LinalgError> {
    let n = r.rows();
    let mut inv = Matrix::zeros(n, n);
    for j in 0..n {
        if r[(j, j)] == T::zero() {
            return Err(LinalgError::RankDeficient(j));
        }
    }
    for col in 0..n {
        // Solve R x = e_col by back substitution.
        for i in (0..=col).rev() {
            let mut s = if i == col { T::one() } else { T::zero() };
            for k in (i + 1)..=col {
                s -= r[(i, k)] * inv[(k, col)];
            }
            inv[(i, col)] = s / r[(i, i)];
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = random(6, 6, 1);
        let spd = a.matmul(&a.transpose()).add(&Matrix::identity(6));
        let l = spd.cholesky().unwrap();
        assert!(l.matmul(&l.transpose()).max_abs_diff(&spd) < 1e-12);
        for i in 0..6 {
            for j in (i + 1)..6 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(m.cholesky(), Err(LinalgError::NotPositiveDefinite { index: 1, .. })));
    }

    #[test]
    fn thin_qr_orthonormal_and_positive_diagonal() {
        let a = random(20, 5, 2);
        let (q, r) = a.thin_qr().unwrap();
        assert!(q.tr_matmul(&q).max_abs_diff(&Matrix::identity(5)) < 1e-13);
        assert!(q.matmul(&r).max_abs_diff(&a) < 1e-13);
        for i in 0..5 {
            assert!(r[(i, i)] > 0.0);
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn jacobi_eigen_reconstructs_sorted() {
        let a = random(7, 7, 3);
        let s = a.add(&a.transpose());
        let (vals, vecs) = s.symmetric_eigen();
        for w in vals.windows(2) {
            assert!(w[0] >= w[1]);
        }
        let recon = vecs.matmul(&Matrix::from_diagonal(&vals)).matmul(&vecs.transpose());
        assert!(recon.max_abs_diff(&s) < 1e-12);
        assert!(vecs.tr_matmul(&vecs).max_abs_diff(&Matrix::identity(7)) < 1e-12);
    }

    #[test]
    fn jacobi_eigen_f32() {
        let s = Matrix::<f32>::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (vals, _) = s.symmetric_eigen();
        assert!((vals[0] - 3.0).abs() < 1e-6 && (vals[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn upper_inverse() {
        let a = random(8, 4, 4);
        let (_, r) = a.thin_qr().unwrap();
        let inv = invert_upper(&r).unwrap();
        assert!(r.matmul(&inv).max_abs_diff(&Matrix::identity(4)) < 1e-12);
    }

    #[test]
    fn log_det_matches_eigen() {
        let a = random(5, 5, 5);
        let spd = a.matmul(&a.transpose()).add(&Matrix::identity(5));
        let (vals, _) = spd.symmetric_eigen();
        let expected: f64 = vals.iter().map(|v| v.ln()).sum();
        assert!((log_det_spd(&spd).unwrap() - expected).abs() < 1e-12);
    }
}
