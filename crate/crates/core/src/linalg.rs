//! Dense row-major matrices and the few numeric kernels the simulator needs.
//! All reductions run in index order so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("matrix buffer", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Panics on ragged input; intended for literals in tests and fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Rows gathered in the order of `ids`.
    pub fn select_rows(&self, ids: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: ids.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, cols: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * cols.len());
        for r in 0..self.rows {
            let row = self.row(r);
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Matrix {
            rows: self.rows,
            cols: cols.len(),
            data,
        }
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::dim(
                "matrix add",
                self.rows * self.cols,
                other.rows * other.cols,
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `selfᵀ · self` (cols × cols).
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut out = Matrix::zeros(n, n);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..n {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &rj) in out_row.iter_mut().zip(row) {
                    *o += ri * rj;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `selfᵀ · v`.
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(self.row(r)) {
                *o += x * vr;
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

pub fn norm_sq(v: &[f64]) -> f64 {
    dot(v, v)
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration. Runs until the Rayleigh quotient moves by less than `tol`
/// (relative) or `max_iter` is reached.
pub fn largest_eigenvalue_psd(a: &Matrix, tol: f64, max_iter: usize) -> f64 {
    let n = a.rows();
    assert_eq!(n, a.cols());
    if n == 0 {
        return 0.0;
    }
    // deterministic, non-degenerate start
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 / n as f64).collect();
    let nv = norm_sq(&v).sqrt();
    v.iter_mut().for_each(|x| *x /= nv);
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = a.matvec(&v);
        let next = dot(&v, &w);
        let nw = norm_sq(&w).sqrt();
        if nw == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / nw).collect();
        if (next - lambda).abs() <= tol * next.abs().max(f64::MIN_POSITIVE) {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Spectral norm of an arbitrary matrix: sqrt of the top eigenvalue of AᵀA.
pub fn spectral_norm(a: &Matrix) -> f64 {
    largest_eigenvalue_psd(&a.gram(), 1e-13, 10_000).sqrt()
}

/// Solve `a x = b` for symmetric positive definite `a` via Cholesky.
pub fn cholesky_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::dim("cholesky solve", n, b.len()));
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::config("matrix is not positive definite"));
                }
                l.set(i, i, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l.get(k, i) * x[k];
        }
        x[i] = s / l.get(i, i);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_diagonal() {
        let a = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]);
        let l = largest_eigenvalue_psd(&a, 1e-14, 10_000);
        assert!((l - 3.0).abs() < 1e-10, "{l}");
    }

    #[test]
    fn power_iteration_rank_one() {
        // [1 1; 1 1] has eigenvalues 2 and 0
        let a = Matrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!((largest_eigenvalue_psd(&a, 1e-14, 1000) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_roundtrip() {
        let a = Matrix::from_rows(&[&[4.0, 1.0, 0.5], &[1.0, 3.0, 0.2], &[0.5, 0.2, 2.0]]);
        let x = [1.0, -2.0, 0.5];
        let b = a.matvec(&x);
        let got = cholesky_solve(&a, &b).unwrap();
        for (g, e) in got.iter().zip(x) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_matches_explicit_product() {
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let g = x.gram();
        assert_eq!(g.as_slice(), &[35.0, 44.0, 44.0, 56.0]);
    }

    #[test]
    fn spectral_norm_of_nonsymmetric() {
        let a = Matrix::from_rows(&[&[0.0, 2.0], &[0.0, 0.0]]);
        assert!((spectral_norm(&a) - 2.0).abs() < 1e-10);
    }
}
