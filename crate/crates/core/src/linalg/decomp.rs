//! Spectral decompositions via Jacobi rotations.
//!
//! Cyclic Jacobi is exact enough at desk scale (d <= 512) and needs no
//! external dependency. The SVD is the one-sided (Hestenes) variant: each
//! rotation diagonalizes the 2x2 Gram block of a column pair, and the left
//! vectors are recovered explicitly by normalizing the rotated columns.

use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix, DiagonalVector};

const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix: columns of `eigvecs` are the
/// eigenvectors, `eigvals` sorted descending.
#[derive(Debug, Clone)]
pub struct SpectrumDecomp {
    pub eigvecs: DenseMatrix,
    pub eigvals: DiagonalVector,
    pub source_dim: usize,
}

impl SpectrumDecomp {
    /// U diag(lambda) U^T.
    pub fn reconstruct(&self) -> DenseMatrix {
        let scaled = self.eigvecs.scale_cols(self.eigvals.entries());
        scaled.matmul(&self.eigvecs.transpose())
    }

    /// Largest eigenvalue (the posterior-collapse threshold for the analytic
    /// rate).
    pub fn lambda_max(&self) -> f64 {
        self.eigvals.entries().first().copied().unwrap_or(0.0)
    }
}

/// Flip each column so its largest-magnitude entry is positive; ties resolved
/// by the lowest index. Makes decompositions deterministic.
fn fix_column_signs(m: &mut DenseMatrix) {
    let (rows, cols) = (m.rows(), m.cols());
    for j in 0..cols {
        let mut best = 0usize;
        let mut best_abs = 0.0f64;
        for i in 0..rows {
            let a = m.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if m.get(best, j) < 0.0 {
            for i in 0..rows {
                m.set(i, j, -m.get(i, j));
            }
        }
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Input must be square and symmetric to 1e-10 (scaled by the largest entry).
/// Eigenvalues come back sorted descending with the deterministic sign
/// convention applied to the eigenvectors.
pub fn sym_eig(m: &DenseMatrix) -> Result<SpectrumDecomp> {
    let op = "sym_eig";
    if !m.is_square() {
        return Err(Error::dimension(op, format!("{}x{} input not square", m.rows(), m.cols())));
    }
    if !m.all_finite() {
        return Err(Error::domain(op, "non-finite entries"));
    }
    let sym_tol = 1e-10 * m.max_abs().max(1.0);
    if !m.is_symmetric(sym_tol) {
        return Err(Error::dimension(op, "input not symmetric to tolerance"));
    }

    let n = m.rows();
    if n == 0 {
        return Ok(SpectrumDecomp {
            eigvecs: DenseMatrix::zeros(0, 0),
            eigvals: DiagonalVector::new(vec![]),
            source_dim: 0,
        });
    }

    let mut a: Vec<f64> = m.data().to_vec();
    let mut v = DenseMatrix::identity(n);
    let mut d: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    let mut b = d.clone();
    let mut z = vec![0.0; n];

    let mut converged = false;
    for sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n - 1 {
            for q in p + 1..n {
                off += a[p * n + q].abs();
            }
        }
        if off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a[p * n + q];
                let g = 100.0 * apq.abs();
                // Small elements are flushed once the diagonals dominate.
                if sweep > 4 && d[p].abs() + g == d[p].abs() && d[q].abs() + g == d[q].abs() {
                    a[p * n + q] = 0.0;
                    continue;
                }
                if apq == 0.0 {
                    continue;
                }
                let h = d[q] - d[p];
                let t = if h.abs() + g == h.abs() {
                    apq / h
                } else {
                    let theta = 0.5 * h / apq;
                    let t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                let hh = t * apq;
                z[p] -= hh;
                z[q] += hh;
                d[p] -= hh;
                d[q] += hh;
                a[p * n + q] = 0.0;
                let rot = |a: &mut [f64], i1: usize, i2: usize| {
                    let g = a[i1];
                    let h = a[i2];
                    a[i1] = g - s * (h + g * tau);
                    a[i2] = h + s * (g - h * tau);
                };
                for j in 0..p {
                    rot(&mut a, j * n + p, j * n + q);
                }
                for j in p + 1..q {
                    rot(&mut a, p * n + j, j * n + q);
                }
                for j in q + 1..n {
                    rot(&mut a, p * n + j, q * n + j);
                }
                for j in 0..n {
                    rot(v.data_mut(), j * n + p, j * n + q);
                }
            }
        }
        for i in 0..n {
            b[i] += z[i];
            d[i] = b[i];
            z[i] = 0.0;
        }
    }
    if !converged {
        return Err(Error::numerical(op, format!("no convergence in {MAX_SWEEPS} sweeps")));
    }

    // Sort descending, permuting eigenvector columns along.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).unwrap());
    let eigvals = DiagonalVector::new(order.iter().map(|&i| d[i]).collect());
    let mut eigvecs = DenseMatrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            eigvecs.set(i, new_j, v.get(i, old_j));
        }
    }
    fix_column_signs(&mut eigvecs);
    Ok(SpectrumDecomp { eigvecs, eigvals, source_dim: n })
}

/// Grow `cols` (orthonormal, length `dim` each) by `needed` further
/// orthonormal vectors, drawn deterministically from the standard basis.
fn extend_orthonormal(cols: &mut Vec<Vec<f64>>, dim: usize, needed: usize) -> Result<()> {
    let mut added = 0;
    for e in 0..dim {
        if added == needed {
            break;
        }
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        // Project out twice for numerical orthogonality.
        for _ in 0..2 {
            for col in cols.iter() {
                let proj = dot(&cand, col);
                for (c, v) in cand.iter_mut().zip(col) {
                    *c -= proj * v;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > 1e-6 {
            for c in cand.iter_mut() {
                *c /= norm;
            }
            cols.push(cand);
            added += 1;
        }
    }
    if added < needed {
        return Err(Error::numerical("extend_orthonormal", "could not complete basis"));
    }
    Ok(())
}

/// Complete a d x k matrix with orthonormal columns to a full d x d
/// orthonormal basis (the input columns come first).
pub fn complete_orthonormal_basis(partial: &DenseMatrix) -> Result<DenseMatrix> {
    let (d, k) = (partial.rows(), partial.cols());
    let mut cols: Vec<Vec<f64>> = (0..k).map(|j| partial.col(j)).collect();
    extend_orthonormal(&mut cols, d, d - k)?;
    let mut out = DenseMatrix::zeros(d, d);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Thin SVD m = A diag(s) B^T with A, B orthonormal and s descending.
pub fn svd(m: &DenseMatrix) -> Result<(DenseMatrix, DiagonalVector, DenseMatrix)> {
    let op = "svd";
    if !m.all_finite() {
        return Err(Error::domain(op, "non-finite entries"));
    }
    if m.rows() < m.cols() {
        let (left, s, right) = svd(&m.transpose())?;
        return Ok((right, s, left));
    }
    let (r, c) = (m.rows(), m.cols());
    if c == 0 || r == 0 {
        return Ok((DenseMatrix::zeros(r, c), DiagonalVector::new(vec![0.0; c]), DenseMatrix::identity(c)));
    }

    let mut w = m.clone();
    let mut v = DenseMatrix::identity(c);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..c - 1 {
            for q in p + 1..c {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..r {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = {
                    let t = 1.0 / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    if zeta < 0.0 {
                        -t
                    } else {
                        t
                    }
                };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..r {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    w.set(i, p, cs * wp - sn * wq);
                    w.set(i, q, sn * wp + cs * wq);
                }
                for i in 0..c {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, cs * vp - sn * vq);
                    v.set(i, q, sn * vp + cs * vq);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerical(op, format!("no convergence in {MAX_SWEEPS} sweeps")));
    }

    let mut norms: Vec<f64> = (0..c).map(|j| dot(&w.col(j), &w.col(j)).sqrt()).collect();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());
    norms = order.iter().map(|&j| norms[j]).collect();
    let s_max = norms.first().copied().unwrap_or(0.0);
    let rank_tol = s_max * 1e-13;

    // Sign convention on the right factor; the matching left column is
    // flipped along so A S B^T is preserved.
    let mut right = DenseMatrix::zeros(c, c);
    let mut left_cols: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut null_slots: Vec<usize> = Vec::new();
    let mut singulars = vec![0.0; c];
    for (new_j, &old_j) in order.iter().enumerate() {
        let vcol = v.col(old_j);
        let mut best_abs = 0.0;
        let mut best = 0usize;
        for (i, &x) in vcol.iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = i;
            }
        }
        let sign = if vcol[best] < 0.0 { -1.0 } else { 1.0 };
        for (i, &x) in vcol.iter().enumerate() {
            right.set(i, new_j, sign * x);
        }
        if norms[new_j] > rank_tol && norms[new_j] > 0.0 {
            singulars[new_j] = norms[new_j];
            let mut col = w.col(old_j);
            for x in col.iter_mut() {
                *x = sign * *x / norms[new_j];
            }
            left_cols.push(col);
        } else {
            singulars[new_j] = 0.0;
            null_slots.push(new_j);
            left_cols.push(vec![0.0; r]); // placeholder
        }
    }
    if !null_slots.is_empty() {
        let mut filled: Vec<Vec<f64>> = left_cols
            .iter()
            .enumerate()
            .filter(|(j, _)| !null_slots.contains(j))
            .map(|(_, c)| c.clone())
            .collect();
        let have = filled.len();
        extend_orthonormal(&mut filled, r, null_slots.len())?;
        for (slot, col) in null_slots.iter().zip(filled.into_iter().skip(have)) {
            left_cols[*slot] = col;
        }
    }
    let mut left = DenseMatrix::zeros(r, c);
    for (j, col) in left_cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            left.set(i, j, x);
        }
    }
    Ok((left, DiagonalVector::new(singulars), right))
}
