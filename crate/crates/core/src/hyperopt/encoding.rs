//! Unconstrained encoding of ICM hyperparameters for the optimizer.
//!
//! Layout: `[ln l, ln sigma_1..ln sigma_T, L_00, L_10, L_11, L_20, ...]`
//! with the lower triangle of `L` row by row. The entries of `L` are free;
//! decoding flips the sign of any column whose diagonal entry is negative,
//! which leaves `B = L L^T` unchanged and keeps the factor canonical.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{IcmParams, PriorMean};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub values: DVector<f64>,
    pub t: usize,
}

impl ParamVector {
    pub fn len_for(t: usize) -> usize {
        1 + t + t * (t + 1) / 2
    }

    pub fn encode(params: &IcmParams) -> Self {
        let t = params.t();
        let mut v = Vec::with_capacity(Self::len_for(t));
        v.push(params.lengthscale.ln());
        v.extend(params.noise_std.iter().map(|s| s.ln()));
        for i in 0..t {
            for j in 0..=i {
                let x = params.chol_coreg[(i, j)];
                v.push(x);
            }
        }
        Self { values: DVector::from_vec(v), t }
    }

    pub fn decode(&self, prior_mean: &PriorMean) -> Result<IcmParams> {
        let t = self.t;
        if self.values.len() != Self::len_for(t) {
            return Err(Error::Shape(format!("parameter vector has {} entries", self.values.len())));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter vector".into()));
        }
        let lengthscale = self.values[0].exp();
        let noise = DVector::from_fn(t, |s, _| self.values[1 + s].exp());
        let mut l = DMatrix::zeros(t, t);
        let mut k = 1 + t;
        for i in 0..t {
            for j in 0..=i {
                l[(i, j)] = self.values[k];
                k += 1;
            }
        }
        for j in 0..t {
            if l[(j, j)] < 0.0 {
                l.column_mut(j).neg_mut();
            }
        }
        IcmParams::new(lengthscale, l, noise, prior_mean.clone())
    }

    /// Turns a gradient taken at `encode(decode(self))` into the gradient at
    /// `self`, undoing the column sign flips of [`ParamVector::decode`].
    pub fn unflip_gradient(&self, grad: &mut DVector<f64>) {
        let t = self.t;
        let base = Self::coreg_offset(t);
        let pos = |i: usize, j: usize| base + i * (i + 1) / 2 + j;
        for j in 0..t {
            if self.values[pos(j, j)] < 0.0 {
                for i in j..t {
                    grad[pos(i, j)] = -grad[pos(i, j)];
                }
            }
        }
    }

    pub fn lengthscale_index() -> usize {
        0
    }

    /// Position of `ln sigma_s`.
    pub fn noise_index(s: usize) -> usize {
        1 + s
    }

    /// Position of the first entry of `L`.
    pub fn coreg_offset(t: usize) -> usize {
        1 + t
    }
}
