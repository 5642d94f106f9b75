//! Inverse-multiquadric observation weights, their centres and decay scales,
//! and the shrinkage entries `d log w^2 / dy` that shift the pseudo-mean.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::IcmParams;
use crate::linalg::SpdFactor;

/// Floor applied to every decay scale `c_t`.
pub const SCALE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    /// Centred on the conditional mean given the other observed channels.
    Conditional,
    /// Centred on the prior mean (the single-output RCGP weight).
    PriorMean,
    /// `w = sigma_t / sqrt(2)` everywhere; reproduces the standard MOGP.
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightSpec {
    pub kind: WeightKind,
    /// Expected outlier fraction per channel, each in `(0, 1)`.
    pub epsilon: Vec<f64>,
    /// Weight maxima; `None` means `sigma_t / sqrt(2)` from the parameters in use.
    pub beta: Option<Vec<f64>>,
    /// Output covariance used for conditioning. `None` falls back to `B + Sigma`.
    pub center_cov: Option<DMatrix<f64>>,
}

impl WeightSpec {
    pub fn new(kind: WeightKind, epsilon: Vec<f64>) -> Self {
        Self { kind, epsilon, beta: None, center_cov: None }
    }

    pub fn constant(t: usize) -> Self {
        Self::new(WeightKind::Constant, vec![0.1; t])
    }

    pub fn with_center_cov(mut self, cov: DMatrix<f64>) -> Self {
        self.center_cov = Some(cov);
        self
    }

    pub fn validate(&self, t: usize) -> Result<()> {
        if self.epsilon.len() != t {
            return Err(Error::Shape(format!("epsilon has {} entries, expected {t}", self.epsilon.len())));
        }
        if self.epsilon.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(Error::InvalidArgument("epsilon entries must lie in (0, 1)".into()));
        }
        if let Some(b) = &self.beta {
            if b.len() != t || b.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument("beta must hold T positive values".into()));
            }
        }
        if let Some(c) = &self.center_cov {
            if c.shape() != (t, t) {
                return Err(Error::Shape("center covariance must be T x T".into()));
            }
            if (0..t).any(|i| !(c[(i, i)] > 0.0)) {
                return Err(Error::InvalidArgument("center covariance needs a positive diagonal".into()));
            }
        }
        Ok(())
    }
}

/// Weights and the quantities they were built from. Entries at masked
/// positions are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightState {
    pub kind: WeightKind,
    pub weights: DMatrix<f64>,
    pub centers: DMatrix<f64>,
    pub scales: DVector<f64>,
    pub shrinkage: DMatrix<f64>,
    pub beta: DVector<f64>,
    /// Whether `beta` is the `sigma_t / sqrt(2)` default (and should follow sigma).
    pub beta_tracks_noise: bool,
}

impl WeightState {
    pub fn weight(&self, i: usize, t: usize) -> f64 {
        self.weights[(i, t)]
    }

    /// `w_{i,t} / beta_t`, in `(0, 1]`.
    pub fn standardized(&self, i: usize, t: usize) -> f64 {
        self.weights[(i, t)] / self.beta[t]
    }

    /// Same standardized weights and shrinkage, with `beta` re-derived from
    /// `params` when it follows the noise level.
    pub fn rescaled(&self, params: &IcmParams) -> WeightState {
        if !self.beta_tracks_noise {
            return self.clone();
        }
        let beta = default_beta(params);
        let mut weights = self.weights.clone();
        for t in 0..weights.ncols() {
            let ratio = beta[t] / self.beta[t];
            for i in 0..weights.nrows() {
                weights[(i, t)] = if self.weights[(i, t)] == self.beta[t] {
                    beta[t]
                } else {
                    self.weights[(i, t)] * ratio
                };
            }
        }
        WeightState { weights, beta, ..self.clone() }
    }
}

pub fn default_beta(params: &IcmParams) -> DVector<f64> {
    params.noise_std.map(|s| s / std::f64::consts::SQRT_2)
}

/// Conditional mean of channel `t` given the observed other channels of one row:
/// `m_t + C_{-t,t}^T C_{-t,-t}^{-1} (y_{-t} - m_{-t})`.
pub fn conditional_center(
    y_i: &[f64],
    mask_i: &[bool],
    t: usize,
    means: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<f64> {
    let others: Vec<usize> = (0..y_i.len()).filter(|&s| s != t && mask_i[s]).collect();
    if others.is_empty() {
        return Ok(means[t]);
    }
    let k = others.len();
    let block = DMatrix::from_fn(k, k, |a, b| cov[(others[a], others[b])]);
    let cross = DVector::from_fn(k, |a, _| cov[(others[a], t)]);
    let resid = DVector::from_fn(k, |a, _| y_i[others[a]] - means[others[a]]);
    let factor = SpdFactor::new(&block)
        .map_err(|_| Error::Singular(format!("conditioning block for channel {t} is singular")))?;
    Ok(means[t] + cross.dot(&factor.solve_vec(&resid)))
}

/// Empirical `(1 - epsilon)` quantile of `residuals` (linear interpolation
/// between order statistics), floored at [`SCALE_FLOOR`].
pub fn decay_scale(residuals: &[f64], epsilon: f64) -> f64 {
    if residuals.is_empty() {
        return 1.0;
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let p = (1.0 - epsilon).clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let q = sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]);
    q.max(SCALE_FLOOR)
}

/// `beta (1 + ((y - gamma) / c)^2)^{-1/2}`.
pub fn imq_weight(y: f64, center: f64, scale: f64, beta: f64) -> f64 {
    let r = (y - center) / scale;
    beta / (1.0 + r * r).sqrt()
}

/// `d/dy log imq_weight(y)^2 = -2 (y - gamma) / (c^2 + (y - gamma)^2)`.
pub fn shrinkage_entry(y: f64, center: f64, scale: f64) -> f64 {
    let r = y - center;
    -2.0 * r / (scale * scale + r * r)
}

pub fn build_weight_state(data: &Dataset, params: &IcmParams, spec: &WeightSpec) -> Result<WeightState> {
    let (n, t_count) = (data.n(), data.t());
    if params.t() != t_count {
        return Err(Error::Shape(format!("parameters have {} channels, data {}", params.t(), t_count)));
    }
    spec.validate(t_count)?;
    let means = params.prior_mean.resolve(data)?;
    let beta = match &spec.beta {
        Some(b) => DVector::from_column_slice(b),
        None => default_beta(params),
    };
    let beta_tracks_noise = spec.beta.is_none();

    let mut weights = DMatrix::from_element(n, t_count, f64::NAN);
    let mut centers = DMatrix::from_element(n, t_count, f64::NAN);
    let mut shrinkage = DMatrix::from_element(n, t_count, f64::NAN);
    let mut scales = DVector::from_element(t_count, 1.0);

    if spec.kind == WeightKind::Constant {
        let beta = default_beta(params);
        for i in 0..n {
            for t in 0..t_count {
                if data.is_observed(i, t) {
                    weights[(i, t)] = beta[t];
                    centers[(i, t)] = means[t];
                    shrinkage[(i, t)] = 0.0;
                }
            }
        }
        return Ok(WeightState {
            kind: spec.kind,
            weights,
            centers,
            scales,
            shrinkage,
            beta,
            beta_tracks_noise: true,
        });
    }

    let cov = match (&spec.kind, &spec.center_cov) {
        (WeightKind::Conditional, Some(c)) => Some(c.clone()),
        (WeightKind::Conditional, None) => Some(params.output_cov()),
        _ => None,
    };
    let mut y_row = vec![0.0; t_count];
    let mut m_row = vec![false; t_count];
    for i in 0..n {
        for t in 0..t_count {
            m_row[t] = data.is_observed(i, t);
            y_row[t] = if m_row[t] { data.y(i, t) } else { 0.0 };
        }
        for t in 0..t_count {
            if !m_row[t] {
                continue;
            }
            centers[(i, t)] = match &cov {
                Some(c) => conditional_center(&y_row, &m_row, t, &means, c)?,
                None => means[t],
            };
        }
    }
    for t in 0..t_count {
        let rows = data.observed_in_channel(t);
        let resid: Vec<f64> = rows.iter().map(|&i| (data.y(i, t) - centers[(i, t)]).abs()).collect();
        scales[t] = decay_scale(&resid, spec.epsilon[t]);
        for &i in &rows {
            let (y, g) = (data.y(i, t), centers[(i, t)]);
            weights[(i, t)] = imq_weight(y, g, scales[t], beta[t]);
            shrinkage[(i, t)] = shrinkage_entry(y, g, scales[t]);
        }
    }
    Ok(WeightState { kind: spec.kind, weights, centers, scales, shrinkage, beta, beta_tracks_noise })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::PriorMean;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn center_ignores_other_channels_when_uncorrelated() {
        let c = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]));
        let m = DVector::from_vec(vec![0.5, -1.0]);
        let g = conditional_center(&[9.0, 40.0], &[true, true], 0, &m, &c).unwrap();
        assert!((g - 0.5).abs() < 1e-12);
    }

    #[test]
    fn center_two_channel_conditioning() {
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let m = DVector::zeros(2);
        let g = conditional_center(&[0.0, 4.0], &[true, true], 0, &m, &c).unwrap();
        assert!((g - 2.0).abs() < 1e-7);
    }

    #[test]
    fn center_perfect_correlation_limit() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let m = DVector::zeros(2);
        let g = conditional_center(&[0.0, 3.5], &[true, true], 0, &m, &c).unwrap();
        assert!((g - 3.5).abs() < 1e-6);
    }

    #[test]
    fn center_falls_back_to_prior_mean_without_other_channels() {
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let m = DVector::from_vec(vec![0.3, 0.0]);
        let g = conditional_center(&[1.0, 4.0], &[true, false], 0, &m, &c).unwrap();
        assert_eq!(g, 0.3);
    }

    #[test]
    fn decay_scale_quantiles() {
        assert_eq!(decay_scale(&[0.7; 9], 0.2), 0.7);
        let r: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((decay_scale(&r, 0.10) - 90.1).abs() < 1e-9);
        assert!((decay_scale(&r, 1e-12) - 100.0).abs() < 1e-9);
        assert_eq!(decay_scale(&[0.0, 0.0], 0.5), SCALE_FLOOR);
    }

    #[test]
    fn imq_values() {
        assert_eq!(imq_weight(1.3, 1.3, 0.4, 0.9), 0.9);
        assert!((imq_weight(2.0, 1.0, 1.0, 1.0) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((imq_weight(3.0 * 0.5, 0.0, 0.5, 2.0) - 2.0 / 10f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn shrinkage_values() {
        assert_eq!(shrinkage_entry(0.4, 0.4, 2.0), 0.0);
        let c = 0.8;
        assert!((shrinkage_entry(1.0 + c, 1.0, c) + 1.0 / c).abs() < 1e-14);
    }

    #[test]
    fn shrinkage_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (y, g) = (rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0));
            let c = rng.random_range(0.2..3.0);
            let beta = rng.random_range(0.1..2.0);
            let h = 1e-5;
            let lw2 = |y: f64| (imq_weight(y, g, c, beta).powi(2)).ln();
            let fd = (lw2(y + h) - lw2(y - h)) / (2.0 * h);
            let exact = shrinkage_entry(y, g, c);
            assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1e-3), "{fd} vs {exact}");
        }
    }

    proptest! {
        #[test]
        fn weight_symmetric_bounded_and_peaked(g in -5.0..5.0f64, d in 0.0..50.0f64, c in 0.01..5.0f64, b in 0.01..3.0f64) {
            let up = imq_weight(g + d, g, c, b);
            let down = imq_weight(g - d, g, c, b);
            prop_assert!((up - down).abs() <= 1e-12);
            prop_assert!(up > 0.0 && up <= b);
            prop_assert!(imq_weight(g, g, c, b) == b);
        }

        #[test]
        fn y_times_w2_stays_bounded(g in -3.0..3.0f64, c in 0.05..3.0f64, b in 0.05..2.0f64) {
            let bound = b * b * (g.abs() + c + 1.0) * 2.0;
            let mut y = -1e6;
            while y <= 1e6 {
                prop_assert!((y * imq_weight(y, g, c, b).powi(2)).abs() <= bound);
                y += 997.3;
            }
            for y in [g + c, g - c, g + 1e6, g - 1e6] {
                prop_assert!((y * imq_weight(y, g, c, b).powi(2)).abs() <= bound);
            }
        }
    }

    fn toy_params(t: usize) -> IcmParams {
        IcmParams::new(
            1.0,
            DMatrix::identity(t, t),
            DVector::from_element(t, 0.4),
            PriorMean::zero(t),
        )
        .unwrap()
    }

    #[test]
    fn constant_kind_is_exact() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let y = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, -2.0, 0.3, 8.0, 1.0]);
        let data = Dataset::complete(x, y).unwrap();
        let p = toy_params(2);
        let w = build_weight_state(&data, &p, &WeightSpec::constant(2)).unwrap();
        for i in 0..3 {
            for t in 0..2 {
                assert_eq!(w.weight(i, t), 0.4 / 2f64.sqrt());
                assert_eq!(w.shrinkage[(i, t)], 0.0);
            }
        }
    }

    #[test]
    fn weights_bounded_by_beta_and_masked_entries_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20;
        let x = DMatrix::from_fn(n, 1, |i, _| i as f64);
        let y = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-3.0..3.0));
        let mut mask = DMatrix::from_element(n, 3, true);
        mask[(2, 1)] = false;
        mask[(5, 0)] = false;
        mask[(5, 2)] = false;
        let data = Dataset::complete(x, y).unwrap().with_mask(mask).unwrap();
        let p = toy_params(3);
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.2, 0.5, 1.0, 0.3, 0.2, 0.3, 1.0]);
        let spec = WeightSpec::new(WeightKind::Conditional, vec![0.1; 3]).with_center_cov(cov);
        let w = build_weight_state(&data, &p, &spec).unwrap();
        for i in 0..n {
            for t in 0..3 {
                if data.is_observed(i, t) {
                    let v = w.weight(i, t);
                    assert!(v > 0.0 && v <= w.beta[t]);
                } else {
                    assert!(w.weight(i, t).is_nan());
                }
            }
        }
        // Row 5 only has channel 1 observed: its centre is the prior mean.
        assert_eq!(w.centers[(5, 1)], 0.0);
    }

    #[test]
    fn rescaling_keeps_standardized_weights() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let y = DMatrix::from_row_slice(4, 2, &[1.0, 0.9, -2.0, -1.5, 3.0, 0.1, 0.2, 0.3]);
        let data = Dataset::complete(x, y).unwrap();
        let p = toy_params(2);
        let spec = WeightSpec::new(WeightKind::Conditional, vec![0.25; 2]);
        let w = build_weight_state(&data, &p, &spec).unwrap();
        let mut p2 = p.clone();
        p2.noise_std = DVector::from_vec(vec![0.1, 0.9]);
        let w2 = w.rescaled(&p2);
        for i in 0..4 {
            for t in 0..2 {
                assert!((w.standardized(i, t) - w2.standardized(i, t)).abs() < 1e-14);
            }
        }
        assert!((w2.beta[1] - 0.9 / 2f64.sqrt()).abs() < 1e-15);
    }
}
