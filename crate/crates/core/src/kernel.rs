//! Intrinsic coregionalisation kernel: `[K(x, x')]_{t,t'} = B_{t,t'} k(x, x')`
//! with a squared-exponential base kernel and `B = L L^T`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FlatIndex};
use crate::error::{Error, Result};

/// Per-channel prior mean, constant over the input space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMean {
    /// Fixed value for each channel.
    Constant(Vec<f64>),
    /// Mean of the observed entries of each channel.
    Empirical,
}

impl PriorMean {
    pub fn zero(t: usize) -> Self {
        PriorMean::Constant(vec![0.0; t])
    }

    /// Channel means `m_t` for `data`.
    pub fn resolve(&self, data: &Dataset) -> Result<DVector<f64>> {
        match self {
            PriorMean::Constant(v) => {
                if v.len() != data.t() {
                    return Err(Error::Shape(format!(
                        "prior mean has {} channels, data has {}",
                        v.len(),
                        data.t()
                    )));
                }
                Ok(DVector::from_column_slice(v))
            }
            PriorMean::Empirical => Ok(DVector::from_fn(data.t(), |t, _| data.channel_mean(t))),
        }
    }
}

/// ICM hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct IcmParams {
    pub lengthscale: f64,
    /// Lower-triangular factor `L` of the coregionalisation matrix.
    pub chol_coreg: DMatrix<f64>,
    pub noise_std: DVector<f64>,
    pub prior_mean: PriorMean,
}

impl IcmParams {
    pub fn new(
        lengthscale: f64,
        chol_coreg: DMatrix<f64>,
        noise_std: DVector<f64>,
        prior_mean: PriorMean,
    ) -> Result<Self> {
        let p = Self { lengthscale, chol_coreg, noise_std, prior_mean };
        p.validate()?;
        Ok(p)
    }

    /// Builds parameters from a coregionalisation matrix `B` (factorized here).
    pub fn from_coreg(
        lengthscale: f64,
        coreg: &DMatrix<f64>,
        noise_std: DVector<f64>,
        prior_mean: PriorMean,
    ) -> Result<Self> {
        let chol = crate::linalg::SpdFactor::with_levels(coreg, &[0.0, 1e-12, 1e-10])?;
        let mut l = chol.lower();
        for i in 0..l.nrows() {
            for j in (i + 1)..l.ncols() {
                l[(i, j)] = 0.0;
            }
        }
        Self::new(lengthscale, l, noise_std, prior_mean)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.noise_std.len();
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(Error::InvalidArgument(format!("lengthscale must be > 0, got {}", self.lengthscale)));
        }
        if self.noise_std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("noise standard deviations must be > 0".into()));
        }
        if self.chol_coreg.shape() != (t, t) {
            return Err(Error::Shape(format!(
                "coregionalisation factor is {:?}, expected {t}x{t}",
                self.chol_coreg.shape()
            )));
        }
        if let PriorMean::Constant(v) = &self.prior_mean {
            if v.len() != t {
                return Err(Error::Shape("prior mean length differs from T".into()));
            }
        }
        Ok(())
    }

    pub fn t(&self) -> usize {
        self.noise_std.len()
    }

    pub fn coreg(&self) -> DMatrix<f64> {
        coreg_matrix(&self.chol_coreg)
    }

    pub fn noise_var(&self, t: usize) -> f64 {
        self.noise_std[t] * self.noise_std[t]
    }

    /// Covariance of a single noisy output vector, `B + diag(sigma^2)`.
    pub fn output_cov(&self) -> DMatrix<f64> {
        let mut c = self.coreg();
        for t in 0..self.t() {
            c[(t, t)] += self.noise_var(t);
        }
        c
    }
}

/// `exp(-||x - x2||^2 / l^2)`.
pub fn sq_exp(x: &[f64], x2: &[f64], lengthscale: f64) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(Error::Shape(format!("point dimensions {} and {}", x.len(), x2.len())));
    }
    if !(lengthscale > 0.0 && lengthscale.is_finite()) {
        return Err(Error::InvalidArgument(format!("lengthscale must be > 0, got {lengthscale}")));
    }
    if x.iter().chain(x2).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite coordinate".into()));
    }
    Ok(sq_exp_unchecked(x.iter().copied(), x2.iter().copied(), lengthscale))
}

fn sq_exp_unchecked(
    x: impl Iterator<Item = f64>,
    x2: impl Iterator<Item = f64>,
    lengthscale: f64,
) -> f64 {
    let d2: f64 = x.zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (lengthscale * lengthscale)).exp()
}

/// `B = L L^T`.
pub fn coreg_matrix(chol_coreg: &DMatrix<f64>) -> DMatrix<f64> {
    chol_coreg * chol_coreg.transpose()
}

/// Base kernel between the rows of `a` and the rows of `b`.
pub fn base_gram(a: &DMatrix<f64>, b: &DMatrix<f64>, lengthscale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        sq_exp_unchecked(a.row(i).iter().copied(), b.row(j).iter().copied(), lengthscale)
    })
}

/// Kronecker-style expansion `B (x) G` in channel-major layout.
fn expand(coreg: &DMatrix<f64>, base: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, q) = base.shape();
    let t = coreg.nrows();
    DMatrix::from_fn(n * t, q * t, |r, c| coreg[(r / n, c / q)] * base[(r % n, c % q)])
}

/// The `NT x NT` ICM Gram matrix of the rows of `x`.
pub fn block_gram(x: &DMatrix<f64>, params: &IcmParams) -> DMatrix<f64> {
    expand(&params.coreg(), &base_gram(x, x, params.lengthscale))
}

/// Cross-covariance between training points and one query point, `NT x T`.
pub fn cross_gram(x: &DMatrix<f64>, x_star: &[f64], params: &IcmParams) -> DMatrix<f64> {
    let q = DMatrix::from_row_slice(1, x_star.len(), x_star);
    cross_gram_many(x, &q, params)
}

/// Cross-covariance between training points and `q` query points, `NT x qT`
/// with the query side also channel-major (column `t * q + j`).
pub fn cross_gram_many(x: &DMatrix<f64>, x_star: &DMatrix<f64>, params: &IcmParams) -> DMatrix<f64> {
    expand(&params.coreg(), &base_gram(x, x_star, params.lengthscale))
}

/// Sorted flat indices of the observed entries.
pub fn restrict_observed(mask: &DMatrix<bool>) -> Result<Vec<usize>> {
    let n = mask.nrows();
    let mut idx = Vec::new();
    for t in 0..mask.ncols() {
        for i in 0..n {
            if mask[(i, t)] {
                idx.push(FlatIndex::new(i, t).to_flat(n));
            }
        }
    }
    if idx.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(idx)
}
