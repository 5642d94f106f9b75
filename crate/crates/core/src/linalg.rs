//! Dense symmetric positive-definite helpers shared by every module.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter levels (times the mean diagonal) tried in order. A matrix
/// that already factorizes is left untouched.
pub const JITTER_LEVELS: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

/// Cholesky factor of `A + jitter * I`.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl SpdFactor {
    /// Factorizes with escalating jitter, failing with the last level tried.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        Self::with_levels(a, &JITTER_LEVELS)
    }

    pub fn with_levels(a: &DMatrix<f64>, levels: &[f64]) -> Result<Self> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::Shape(format!("expected square matrix, got {}x{}", n, a.ncols())));
        }
        if n == 0 {
            return Err(Error::EmptyData);
        }
        let scale = a.diagonal().mean().abs();
        if !scale.is_finite() {
            return Err(Error::InvalidArgument("matrix has non-finite diagonal".into()));
        }
        let scale = if scale > 0.0 { scale } else { 1.0 };
        let mut last = 0.0;
        for &level in levels {
            let jitter = level * scale;
            let mut m = a.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(m) {
                return Ok(Self { chol, jitter });
            }
            last = jitter;
        }
        Err(Error::NotPositiveDefinite { jitter: last })
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `A^-1 = L^-T L^-1`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let linv = self.lower_inverse();
        let mut out = linv.transpose() * &linv;
        symmetrize(&mut out);
        out
    }

    /// `L^-1`, by forward substitution restricted to the non-zero rows of each column.
    pub fn lower_inverse(&self) -> DMatrix<f64> {
        let l = self.chol.l_dirty();
        let n = l.nrows();
        let mut out = DMatrix::zeros(n, n);
        for k in 0..n {
            let x = &mut out.as_mut_slice()[k * n..(k + 1) * n];
            x[k] = 1.0;
            for j in k..n {
                x[j] /= l[(j, j)];
                let xj = x[j];
                let col = &l.as_slice()[j * n + j + 1..(j + 1) * n];
                for (xi, lij) in x[j + 1..].iter_mut().zip(col) {
                    *xi -= xj * lij;
                }
            }
        }
        out
    }

    /// `L^{-1} b` with `L` the lower factor.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    /// Diagonal of the inverse, `[A^-1]_kk = ||L^-1 e_k||^2`, one column of
    /// `L^-1` at a time (only rows `>= k` are non-zero).
    pub fn inverse_diagonal(&self) -> DVector<f64> {
        let l = self.chol.l_dirty();
        let n = l.nrows();
        let mut out = DVector::zeros(n);
        let mut x = vec![0.0; n];
        for k in 0..n {
            x[k..].iter_mut().for_each(|v| *v = 0.0);
            x[k] = 1.0;
            let mut acc = 0.0;
            for j in k..n {
                let xj = x[j] / l[(j, j)];
                acc += xj * xj;
                let col = &l.as_slice()[j * n + j + 1..(j + 1) * n];
                for (xi, lij) in x[j + 1..].iter_mut().zip(col) {
                    *xi -= xj * lij;
                }
            }
            out[k] = acc;
        }
        out
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn select_rows_cols(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])])
}

pub fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |a, b| m[(idx[a], b)])
}

pub fn select_entries(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&k| v[k]))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Projects a symmetric matrix onto the matrices with eigenvalues `>= floor`.
pub fn project_psd(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_escalates_on_singular_input() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = SpdFactor::new(&a).unwrap();
        assert!(f.jitter() > 0.0);
        let x = f.solve_vec(&DVector::from_vec(vec![1.0, 1.0]));
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn inverse_diagonal_matches_dense_inverse() {
        let m = DMatrix::from_fn(7, 7, |i, j| ((i * 7 + j) as f64 * 0.37).sin());
        let a = &m * m.transpose() + DMatrix::identity(7, 7) * 0.5;
        let f = SpdFactor::new(&a).unwrap();
        let dense = a.try_inverse().unwrap();
        for (k, v) in f.inverse_diagonal().iter().enumerate() {
            assert!((v - dense[(k, k)]).abs() < 1e-10 * dense[(k, k)]);
        }
    }

    #[test]
    fn inverse_matches_dense_inverse() {
        let m = DMatrix::from_fn(9, 9, |i, j| ((i * 9 + j) as f64 * 0.71).cos());
        let a = &m * m.transpose() + DMatrix::identity(9, 9) * 0.3;
        let f = SpdFactor::new(&a).unwrap();
        let dense = a.clone().try_inverse().unwrap();
        assert!((f.inverse() - &dense).abs().max() < 1e-9 * dense.abs().max());
        let l = f.lower();
        assert!((&l * f.lower_inverse() - DMatrix::identity(9, 9)).abs().max() < 1e-12);
    }

    #[test]
    fn indefinite_matrix_fails_with_last_jitter() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match SpdFactor::new(&a) {
            Err(Error::NotPositiveDefinite { jitter }) => assert!(jitter > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_det_matches_product_of_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let f = SpdFactor::with_levels(&a, &[0.0]).unwrap();
        assert!((f.log_det() - 11.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn psd_projection_floors_eigenvalues() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let p = project_psd(&a, 1e-6);
        assert!(min_eigenvalue(&p) >= 1e-6 - 1e-12);
    }
}
