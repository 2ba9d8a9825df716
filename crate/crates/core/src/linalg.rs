//! Dense row-major matrices for the hot loops; factorizations go through nalgebra.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m.data[i * d.len() + i] = v;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// out = A x
    #[inline]
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        gemv(&self.data, self.cols, x, out);
    }

    /// out = A^T x
    #[inline]
    pub fn matvec_t(&self, x: &[f64], out: &mut [f64]) {
        gemv_t(&self.data, self.cols, x, out);
    }

    pub fn mul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a != 0.0 {
                    let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                    axpy(a, orow, &mut out.data[i * other.cols..(i + 1) * other.cols]);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// A^T A
    pub fn gram(&self) -> Mat {
        self.transpose().mul(self)
    }

    pub fn to_na(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_na(m: &DMatrix<f64>) -> Mat {
        Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    /// Inverse of a symmetric positive definite matrix via Cholesky.
    pub fn spd_inverse(&self) -> Result<Mat> {
        let chol = self
            .to_na()
            .cholesky()
            .ok_or_else(|| Error::Linalg("Cholesky factorization failed".into()))?;
        Ok(Mat::from_na(&chol.inverse()))
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> f64 {
        if self.rows == 0 || self.cols == 0 {
            return 0.0;
        }
        self.to_na().singular_values().iter().cloned().fold(0.0, f64::max)
    }

    /// Eigenvalues of a symmetric matrix, ascending.
    pub fn symmetric_eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.to_na().symmetric_eigen().eigenvalues.iter().cloned().collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }
}

/// out = A x for a row-major A with `cols` columns.
#[inline]
pub fn gemv(a: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(a.len(), cols * out.len());
    if cols == 0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    for (o, row) in out.iter_mut().zip(a.chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

/// out = A^T x for a row-major A with `cols` columns.
#[inline]
pub fn gemv_t(a: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), cols);
    debug_assert_eq!(a.len(), cols * x.len());
    out.iter_mut().for_each(|o| *o = 0.0);
    if cols == 0 {
        return;
    }
    for (&xi, row) in x.iter().zip(a.chunks_exact(cols)) {
        if xi != 0.0 {
            axpy(xi, row, out);
        }
    }
}

/// A += alpha u v^T for a row-major A with v.len() columns.
#[inline]
pub fn ger(alpha: f64, u: &[f64], v: &[f64], a: &mut [f64]) {
    let cols = v.len();
    if cols == 0 {
        return;
    }
    for (&ui, row) in u.iter().zip(a.chunks_exact_mut(cols)) {
        let c = alpha * ui;
        if c != 0.0 {
            axpy(c, v, row);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// y += a x
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Largest eigenvalue of A^T A by power iteration (100 iterations, tol 1e-10).
pub fn power_iteration_gram(a: &Mat) -> f64 {
    let n = a.cols;
    if n == 0 {
        return 0.0;
    }
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut av = vec![0.0; a.rows];
    let mut w = vec![0.0; n];
    let mut lam = 0.0;
    for _ in 0..100 {
        a.matvec(&v, &mut av);
        a.matvec_t(&av, &mut w);
        let nw = norm2(&w);
        if nw == 0.0 {
            return 0.0;
        }
        let new_lam = dot(&v, &w);
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / nw;
        }
        if (new_lam - lam).abs() <= 1e-10 * new_lam.abs().max(1.0) {
            lam = new_lam;
            break;
        }
        lam = new_lam;
    }
    // Rayleigh quotient at the final vector
    a.matvec(&v, &mut av);
    dot(&av, &av).max(lam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matvec_and_transpose_agree() {
        let a = Mat::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        let x = [1.0, -2.0, 0.5, 3.0];
        let mut y = [0.0; 3];
        a.matvec(&x, &mut y);
        let at = a.transpose();
        let mut z = [0.0; 4];
        at.matvec(&x[..3], &mut z);
        let mut z2 = [0.0; 4];
        a.matvec_t(&x[..3], &mut z2);
        assert_eq!(z, z2);
        assert_abs_diff_eq!(y[0], -5.0 + 8.0 - 1.5 - 6.0, epsilon = 1e-12);
    }

    #[test]
    fn power_iteration_matches_eigen() {
        let a = Mat::from_fn(5, 7, |i, j| ((i * 7 + j) as f64 * 0.37).sin());
        let ev = a.gram().symmetric_eigenvalues();
        assert_abs_diff_eq!(power_iteration_gram(&a), *ev.last().unwrap(), epsilon = 1e-6);
    }

    #[test]
    fn spd_inverse_roundtrip() {
        let p = Mat::from_fn(3, 3, |i, j| if i == j { 4.0 } else { 1.0 });
        let inv = p.spd_inverse().unwrap();
        let id = p.mul(&inv);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(id.get(i, j), if i == j { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
    }
}
