//! Dense real linear algebra at desk scale: row-major matrices, diagonal
//! vectors, spectral decompositions and a reproducible random stream.
//!
//! Everything is `f64`; the analytic oracles elsewhere in the crate need the
//! tight tolerances that 32-bit arithmetic cannot hold.

mod decomp;
mod rng;

pub use decomp::{complete_orthonormal_basis, svd, sym_eig, SpectrumDecomp};
pub use rng::{gaussian_sample, RngStream};

use crate::error::{Error, Result};

/// Dense matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension(
                "DenseMatrix::new",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
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
        Self { rows, cols, data }
    }

    /// Diagonal matrix from a slice.
    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m.data[i * d.len() + i] = v;
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul: inner dimensions must agree");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in arow.iter().enumerate() {
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec: dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// x^T M, returned as a vector of length `cols`.
    pub fn tmatvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len(), "tmatvec: dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o += xi * m;
            }
        }
        out
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        DenseMatrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        DenseMatrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        let data = self.data.iter().map(|a| a * s).collect();
        DenseMatrix { rows: self.rows, cols: self.cols, data }
    }

    /// Row i multiplied by `factors[i]`.
    pub fn scale_rows(&self, factors: &[f64]) -> DenseMatrix {
        assert_eq!(self.rows, factors.len(), "scale_rows: dimension mismatch");
        let mut out = self.clone();
        for (i, &f) in factors.iter().enumerate() {
            for v in out.row_mut(i) {
                *v *= f;
            }
        }
        out
    }

    /// Column j multiplied by `factors[j]`.
    pub fn scale_cols(&self, factors: &[f64]) -> DenseMatrix {
        assert_eq!(self.cols, factors.len(), "scale_cols: dimension mismatch");
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, &f) in out.row_mut(i).iter_mut().zip(factors) {
                *v *= f;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self.get(i, j) - self.get(j, i)).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    /// Diagonal of M^T M, i.e. squared column norms.
    pub fn gram_diag(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v * v;
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        assert!(self.is_square());
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    /// Solve (M + shift*I) X = B for symmetric positive definite M via Cholesky.
    pub fn solve_spd_shifted(&self, shift: f64, rhs: &DenseMatrix) -> Result<DenseMatrix> {
        let op = "solve_spd_shifted";
        if !self.is_square() || self.rows != rhs.rows {
            return Err(Error::dimension(op, "system and rhs shapes do not agree"));
        }
        let n = self.rows;
        // Lower Cholesky factor of self + shift*I.
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self.get(i, j) + if i == j { shift } else { 0.0 };
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(Error::numerical(op, "matrix not positive definite"));
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        let mut x = rhs.clone();
        for c in 0..rhs.cols {
            // Forward substitution L y = b.
            for i in 0..n {
                let mut sum = x.get(i, c);
                for k in 0..i {
                    sum -= l[i * n + k] * x.get(k, c);
                }
                x.set(i, c, sum / l[i * n + i]);
            }
            // Back substitution L^T x = y.
            for i in (0..n).rev() {
                let mut sum = x.get(i, c);
                for k in (i + 1)..n {
                    sum -= l[k * n + i] * x.get(k, c);
                }
                x.set(i, c, sum / l[i * n + i]);
            }
        }
        Ok(x)
    }
}

/// Diagonal of a diagonal matrix (covariances, eigenvalues, singular values).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalVector {
    entries: Vec<f64>,
}

impl DiagonalVector {
    pub fn new(entries: Vec<f64>) -> Self {
        Self { entries }
    }

    pub fn constant(dim: usize, v: f64) -> Self {
        Self { entries: vec![v; dim] }
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }

    pub fn all_positive(&self) -> bool {
        self.entries.iter().all(|&v| v > 0.0)
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    pub fn to_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_diag(&self.entries)
    }
}

impl From<Vec<f64>> for DiagonalVector {
    fn from(entries: Vec<f64>) -> Self {
        Self { entries }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Biased sample covariance (1/n) sum (x - mean)(x - mean)^T of row-stacked data.
pub fn sample_covariance(data: &DenseMatrix, mean: &[f64]) -> Result<DenseMatrix> {
    let op = "sample_covariance";
    let (n, d) = (data.rows(), data.cols());
    if n == 0 {
        return Err(Error::dimension(op, "need at least one sample"));
    }
    if mean.len() != d {
        return Err(Error::dimension(op, format!("mean has dim {}, data has {d}", mean.len())));
    }
    let mut centered = data.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(mean) {
            *v -= m;
        }
    }
    // Entry-wise accumulation keeps the result exactly symmetric.
    let mut cov = DenseMatrix::zeros(d, d);
    for r in 0..n {
        let row = centered.row(r);
        for i in 0..d {
            let xi = row[i];
            let crow = &mut cov.data[i * d..(i + 1) * d];
            for (c, &xj) in crow[i..].iter_mut().zip(&row[i..]) {
                *c += xi * xj;
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) * inv_n;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    Ok(cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_example() {
        let a = DenseMatrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = DenseMatrix::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = DenseMatrix::from_fn(3, 5, |i, j| (i * 7 + j) as f64);
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn solve_spd_recovers_inverse_action() {
        let m = DenseMatrix::new(2, 2, vec![4.0, 1.0, 1.0, 3.0]).unwrap();
        let rhs = DenseMatrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        let x = m.solve_spd_shifted(0.0, &rhs).unwrap();
        let back = m.matmul(&x);
        assert!(back.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn covariance_single_row_at_mean_is_zero() {
        let data = DenseMatrix::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let cov = sample_covariance(&data, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(cov.max_abs(), 0.0);
    }

    #[test]
    fn covariance_two_point_hand_case() {
        let data = DenseMatrix::new(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let cov = sample_covariance(&data, &[0.0, 0.0]).unwrap();
        assert_eq!(cov.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn covariance_matches_two_pass_oracle() {
        let mut rng = RngStream::new(42);
        let data = DenseMatrix::from_fn(100, 5, |_, _| rng.normal());
        let mut mean = vec![0.0; 5];
        for r in 0..100 {
            for (m, v) in mean.iter_mut().zip(data.row(r)) {
                *m += v / 100.0;
            }
        }
        let cov = sample_covariance(&data, &mean).unwrap();
        // Independent two-pass, per-entry loop.
        for i in 0..5 {
            for j in 0..5 {
                let mut acc = 0.0;
                for r in 0..100 {
                    acc += (data.get(r, i) - mean[i]) * (data.get(r, j) - mean[j]);
                }
                acc /= 100.0;
                assert!((acc - cov.get(i, j)).abs() <= 1e-12, "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn covariance_dimension_mismatch_rejected() {
        let data = DenseMatrix::zeros(3, 2);
        assert!(sample_covariance(&data, &[0.0; 3]).is_err());
    }
}
