//! Datasets with per-entry observation masks and the channel-major flat index.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Position of observation `obs` in channel `channel` (both zero-based).
///
/// The flat position is `channel * n + obs`, i.e. `vec(Y)` stacks the columns
/// of the `N x T` output matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FlatIndex {
    pub obs: usize,
    pub channel: usize,
}

impl FlatIndex {
    pub fn new(obs: usize, channel: usize) -> Self {
        Self { obs, channel }
    }

    pub fn to_flat(self, n: usize) -> usize {
        self.channel * n + self.obs
    }

    pub fn from_flat(k: usize, n: usize) -> Self {
        Self { obs: k % n, channel: k / n }
    }
}

/// Inputs `X` (N x d), outputs `Y` (N x T) and an observation mask.
///
/// Masked entries of `outputs` are never read; they are stored as NaN by the
/// constructors that take `Option` cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: DMatrix<f64>,
    outputs: DMatrix<f64>,
    mask: DMatrix<bool>,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, outputs: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        let n = inputs.nrows();
        if n == 0 || inputs.ncols() == 0 || outputs.ncols() == 0 {
            return Err(Error::Shape("need N >= 1, d >= 1 and T >= 1".into()));
        }
        if outputs.nrows() != n {
            return Err(Error::Shape(format!("{} input rows but {} output rows", n, outputs.nrows())));
        }
        if mask.shape() != outputs.shape() {
            return Err(Error::Shape("mask shape differs from outputs".into()));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite input value".into()));
        }
        for i in 0..n {
            let mut any = false;
            for t in 0..outputs.ncols() {
                if mask[(i, t)] {
                    any = true;
                    if !outputs[(i, t)].is_finite() {
                        return Err(Error::InvalidArgument(format!(
                            "non-finite observed output at row {i}, channel {t}"
                        )));
                    }
                }
            }
            if !any {
                return Err(Error::InvalidArgument(format!("row {i} has no observed output")));
            }
        }
        Ok(Self { inputs, outputs, mask })
    }

    /// Fully observed dataset.
    pub fn complete(inputs: DMatrix<f64>, outputs: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(outputs.nrows(), outputs.ncols(), true);
        Self::new(inputs, outputs, mask)
    }

    pub fn n(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn d(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn t(&self) -> usize {
        self.outputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn outputs(&self) -> &DMatrix<f64> {
        &self.outputs
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn is_observed(&self, i: usize, t: usize) -> bool {
        self.mask[(i, t)]
    }

    pub fn y(&self, i: usize, t: usize) -> f64 {
        self.outputs[(i, t)]
    }

    /// Overwrites an observed entry.
    pub fn set_y(&mut self, i: usize, t: usize, value: f64) {
        debug_assert!(self.mask[(i, t)]);
        self.outputs[(i, t)] = value;
    }

    pub fn set_input_row(&mut self, i: usize, x: &[f64]) {
        for (j, v) in x.iter().enumerate() {
            self.inputs[(i, j)] = *v;
        }
    }

    pub fn is_complete_row(&self, i: usize) -> bool {
        (0..self.t()).all(|t| self.mask[(i, t)])
    }

    pub fn complete_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.is_complete_row(i)).collect()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn observed_in_channel(&self, t: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.mask[(i, t)]).collect()
    }

    /// `vec(Y)` in channel-major order; masked entries are zero.
    pub fn y_vec(&self) -> DVector<f64> {
        let n = self.n();
        DVector::from_fn(n * self.t(), |k, _| {
            let FlatIndex { obs, channel } = FlatIndex::from_flat(k, n);
            if self.mask[(obs, channel)] {
                self.outputs[(obs, channel)]
            } else {
                0.0
            }
        })
    }

    /// Dataset with rows reordered by `perm` (row `k` of the result is row `perm[k]`).
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let n = self.n();
        assert_eq!(perm.len(), n);
        Self {
            inputs: DMatrix::from_fn(n, self.d(), |i, j| self.inputs[(perm[i], j)]),
            outputs: DMatrix::from_fn(n, self.t(), |i, t| self.outputs[(perm[i], t)]),
            mask: DMatrix::from_fn(n, self.t(), |i, t| self.mask[(perm[i], t)]),
        }
    }

    /// Copy with one additional entry masked out.
    pub fn without_entry(&self, i: usize, t: usize) -> Result<Self> {
        let mut mask = self.mask.clone();
        mask[(i, t)] = false;
        let mut outputs = self.outputs.clone();
        outputs[(i, t)] = f64::NAN;
        Self::new(self.inputs.clone(), outputs, mask)
    }

    pub fn with_mask(&self, mask: DMatrix<bool>) -> Result<Self> {
        let mut outputs = self.outputs.clone();
        for (v, &m) in outputs.iter_mut().zip(mask.iter()) {
            if !m {
                *v = f64::NAN;
            }
        }
        Self::new(self.inputs.clone(), outputs, mask)
    }

    /// Mean of the observed entries of channel `t`.
    pub fn channel_mean(&self, t: usize) -> f64 {
        let rows = self.observed_in_channel(t);
        if rows.is_empty() {
            return 0.0;
        }
        rows.iter().map(|&i| self.outputs[(i, t)]).sum::<f64>() / rows.len() as f64
    }

    /// Sample standard deviation of the observed entries of channel `t`.
    pub fn channel_std(&self, t: usize) -> f64 {
        let rows = self.observed_in_channel(t);
        if rows.len() < 2 {
            return 1.0;
        }
        let mean = self.channel_mean(t);
        let ss: f64 = rows.iter().map(|&i| (self.outputs[(i, t)] - mean).powi(2)).sum();
        (ss / (rows.len() - 1) as f64).sqrt()
    }
}
