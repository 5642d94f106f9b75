//! Synthetic ICM data, outlier injection, evaluation metrics, posterior
//! influence curves and seeded benchmark sweeps.
//!
//! Channel indices are zero-based throughout (column `y_1` is channel 0).

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::hyperopt::{fit, FitConfig, FitMethod};
use crate::inference::{kl_gaussian, mogp_predict, FittedState, Predictive};
use crate::kernel::{base_gram, IcmParams, PriorMean};
use crate::linalg::SpdFactor;
use crate::robust_cov::median_mad;
use crate::weights::{build_weight_state, WeightKind, WeightSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Shape(format!("{what} has ragged rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn check_range(range: (f64, f64), what: &str) -> Result<()> {
    if !(range.0 <= range.1) || !range.0.is_finite() || !range.1.is_finite() {
        return Err(Error::InvalidArgument(format!("{what} range must satisfy low <= high")));
    }
    Ok(())
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("contamination fraction must be in [0, 1), got {fraction}")));
    }
    Ok(())
}

/// Ground-truth ICM model that synthetic datasets are drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct GeneratorConfig {
    pub n: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    /// Inputs are uniform on `[low, high]^d`.
    pub input_range: (f64, f64),
    pub lengthscale: f64,
    /// Coregionalisation matrix `B`, row by row.
    pub coreg: Vec<Vec<f64>>,
    /// Per-channel noise variances.
    pub noise_var: Vec<f64>,
    /// Latent mean per channel (zero when omitted).
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
}

fn default_d() -> usize {
    1
}

impl GeneratorConfig {
    pub fn t(&self) -> usize {
        self.noise_var.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.t() == 0 {
            return Err(Error::InvalidArgument("generator needs n, d and T all positive".into()));
        }
        check_range(self.input_range, "input")?;
        let b = self.coreg_matrix()?;
        if b.shape() != (self.t(), self.t()) {
            return Err(Error::Shape(format!("coreg is {:?} but there are {} noise variances", b.shape(), self.t())));
        }
        if self.noise_var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument("noise variances must be > 0".into()));
        }
        if let Some(m) = &self.mean {
            if m.len() != self.t() {
                return Err(Error::Shape("mean length differs from T".into()));
            }
        }
        Ok(())
    }

    pub fn coreg_matrix(&self) -> Result<DMatrix<f64>> {
        matrix_from_rows(&self.coreg, "coreg")
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        match &self.mean {
            Some(m) => DVector::from_column_slice(m),
            None => DVector::zeros(self.t()),
        }
    }

    /// The generating hyperparameters, paired with the given model prior mean.
    pub fn true_params(&self, prior_mean: PriorMean) -> Result<IcmParams> {
        self.validate()?;
        let noise = DVector::from_iterator(self.t(), self.noise_var.iter().map(|v| v.sqrt()));
        IcmParams::from_coreg(self.lengthscale, &self.coreg_matrix()?, noise, prior_mean)
    }
}

/// Noisy observations together with the noise-free latent values.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub data: Dataset,
    /// `F`, `N x T`, at the inputs of `data`.
    pub latent: DMatrix<f64>,
}

fn uniform_inputs<R: Rng>(config: &GeneratorConfig, n: usize, rng: &mut R) -> DMatrix<f64> {
    let (lo, hi) = config.input_range;
    DMatrix::from_fn(n, config.d, |_, _| if hi > lo { rng.random_range(lo..hi) } else { lo })
}

/// Draws inputs uniformly, the latent from the ICM prior and adds channel noise.
pub fn sample_icm<R: Rng>(config: &GeneratorConfig, rng: &mut R) -> Result<Sample> {
    config.validate()?;
    let x = uniform_inputs(config, config.n, rng);
    sample_at(config, x, rng)
}

/// As [`sample_icm`] with the inputs given.
pub fn sample_at<R: Rng>(config: &GeneratorConfig, x: DMatrix<f64>, rng: &mut R) -> Result<Sample> {
    config.validate()?;
    let n = x.nrows();
    let t = config.t();
    let params = config.true_params(PriorMean::zero(t))?;
    // vec(F) ~ N(0, B (x) K) is F = L_K Z L_B^T with Z standard normal.
    let lk = SpdFactor::new(&base_gram(&x, &x, config.lengthscale))?.lower();
    let z = DMatrix::from_fn(n, t, |_, _| StandardNormal.sample(rng));
    let mean = config.mean_vector();
    let mut latent = lk * z * params.chol_coreg.transpose();
    for c in 0..t {
        for i in 0..n {
            latent[(i, c)] += mean[c];
        }
    }
    let noise: DMatrix<f64> = DMatrix::from_fn(n, t, |_, c| {
        let e: f64 = StandardNormal.sample(rng);
        e * config.noise_var[c].sqrt()
    });
    let data = Dataset::complete(x, &latent + noise)?;
    Ok(Sample { data, latent })
}

/// Outlier-injection schemes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Contamination {
    None,
    /// Selected entries get `+z` for one half and `-z` for the other,
    /// `z ~ U(magnitude)` in units of the channel standard deviation.
    Uniform {
        fraction: f64,
        #[serde(default = "default_big_magnitude")]
        magnitude: (f64, f64),
        /// Channels to contaminate (all when omitted), each independently.
        #[serde(default)]
        channels: Option<Vec<usize>>,
    },
    /// Like `Uniform` but every selected entry gets `+z`.
    Asymmetric {
        fraction: f64,
        #[serde(default = "default_big_magnitude")]
        magnitude: (f64, f64),
        #[serde(default)]
        channels: Option<Vec<usize>>,
    },
    /// Inputs of the selected rows move to the input medians plus
    /// `U(0, 0.1 MAD_j)`; the target output becomes `6 + U(0, 0.1 MAD_y)`.
    Focused { fraction: f64, channel: usize },
    /// Inputs of the selected rows are redrawn uniformly inside `interval`
    /// (every input dimension) and the target output from `N(mean, var)`.
    FocusedInterval { fraction: f64, channel: usize, interval: (f64, f64), mean: f64, var: f64 },
    /// Adds `U(magnitude)` when the value is below the prior mean and
    /// subtracts it otherwise.
    IntervalShift {
        fraction: f64,
        channel: usize,
        #[serde(default = "default_shift_magnitude")]
        magnitude: (f64, f64),
    },
    /// Adds `+-alpha v` to the first `s` channels of selected rows, with
    /// `v ~ U(base_range)^s` and `alpha` chosen so that the Mahalanobis
    /// distance under `B_{1:s,1:s}` equals `MD ~ U(md_range)`.
    Mahalanobis {
        fraction: f64,
        s: usize,
        #[serde(default = "default_md_range")]
        md_range: (f64, f64),
        #[serde(default = "default_base_range")]
        base_range: (f64, f64),
    },
}

fn default_big_magnitude() -> (f64, f64) {
    (6.0, 9.0)
}

fn default_shift_magnitude() -> (f64, f64) {
    (2.0, 3.0)
}

fn default_md_range() -> (f64, f64) {
    (10.0, 15.0)
}

fn default_base_range() -> (f64, f64) {
    (0.5, 1.5)
}

impl Contamination {
    pub fn validate(&self, t: usize) -> Result<()> {
        let channel_ok = |c: usize| {
            if c < t {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("channel {c} out of range for T = {t}")))
            }
        };
        match self {
            Contamination::None => Ok(()),
            Contamination::Uniform { fraction, magnitude, channels } | Contamination::Asymmetric { fraction, magnitude, channels } => {
                check_fraction(*fraction)?;
                check_range(*magnitude, "magnitude")?;
                channels.iter().flatten().try_for_each(|&c| channel_ok(c))
            }
            Contamination::Focused { fraction, channel } => {
                check_fraction(*fraction)?;
                channel_ok(*channel)
            }
            Contamination::FocusedInterval { fraction, channel, interval, var, .. } => {
                check_fraction(*fraction)?;
                check_range(*interval, "focus interval")?;
                if !(*var >= 0.0) {
                    return Err(Error::InvalidArgument("focused outlier variance must be >= 0".into()));
                }
                channel_ok(*channel)
            }
            Contamination::IntervalShift { fraction, channel, magnitude } => {
                check_fraction(*fraction)?;
                check_range(*magnitude, "magnitude")?;
                channel_ok(*channel)
            }
            Contamination::Mahalanobis { fraction, s, md_range, base_range } => {
                check_fraction(*fraction)?;
                check_range(*md_range, "MD")?;
                check_range(*base_range, "base vector")?;
                if *s == 0 || *s > t {
                    return Err(Error::InvalidArgument(format!("need 1 <= S <= T, got S = {s}, T = {t}")));
                }
                Ok(())
            }
        }
    }
}

/// What some schemes need to know about the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Reference {
    /// Prior mean per channel (side test of the interval shift).
    pub prior_mean: DVector<f64>,
    /// Coregionalisation matrix (Mahalanobis scheme).
    pub coreg: DMatrix<f64>,
}

/// Contaminated copy and the `(row, channel)` entries that were altered,
/// sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct Contaminated {
    pub data: Dataset,
    pub outliers: Vec<(usize, usize)>,
}

fn draw(rng: &mut impl Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Picks `floor(fraction * |candidates|)` of the candidates, in random order.
fn select(candidates: &[usize], fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    let k = (fraction * candidates.len() as f64 + 1e-9).floor() as usize;
    if k == 0 {
        if fraction > 0.0 {
            log::warn!("contamination fraction {fraction} selects no entries out of {}", candidates.len());
        }
        return Vec::new();
    }
    sample(rng, candidates.len(), k).into_iter().map(|j| candidates[j]).collect()
}

fn rows_observing(data: &Dataset, channels: &[usize]) -> Vec<usize> {
    (0..data.n()).filter(|&i| channels.iter().all(|&c| data.is_observed(i, c))).collect()
}

fn channel_list(channels: &Option<Vec<usize>>, t: usize) -> Vec<usize> {
    channels.clone().unwrap_or_else(|| (0..t).collect())
}

/// Rows selected by a focused-interval scheme and their new inputs. Used
/// before sampling so that the latent truth is known at the moved inputs.
pub fn focused_interval_inputs(
    x: &mut DMatrix<f64>,
    fraction: f64,
    interval: (f64, f64),
    rng: &mut impl Rng,
) -> Vec<usize> {
    let rows: Vec<usize> = (0..x.nrows()).collect();
    let chosen = select(&rows, fraction, rng);
    for &i in &chosen {
        for j in 0..x.ncols() {
            x[(i, j)] = draw(rng, interval);
        }
    }
    chosen
}

fn replace_focused_targets(data: &mut Dataset, rows: &[usize], channel: usize, mean: f64, var: f64, rng: &mut impl Rng) -> Result<()> {
    let normal = Normal::new(mean, var.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for &i in rows {
        data.set_y(i, channel, normal.sample(rng));
    }
    Ok(())
}

/// Applies `scheme` to a copy of `data`. Only observed entries are altered;
/// inputs change only under the focused schemes.
pub fn contaminate<R: Rng>(data: &Dataset, scheme: &Contamination, reference: &Reference, rng: &mut R) -> Result<Contaminated> {
    let t = data.t();
    scheme.validate(t)?;
    let mut out = data.clone();
    let mut outliers = Vec::new();
    match scheme {
        Contamination::None => {}
        Contamination::Uniform { fraction, magnitude, channels } | Contamination::Asymmetric { fraction, magnitude, channels } => {
            let split = matches!(scheme, Contamination::Uniform { .. });
            for c in channel_list(channels, t) {
                let scale = data.channel_std(c);
                let chosen = select(&data.observed_in_channel(c), *fraction, rng);
                let half = chosen.len() / 2;
                for (j, &i) in chosen.iter().enumerate() {
                    let z = draw(rng, *magnitude) * scale;
                    let sign = if split && j >= half { -1.0 } else { 1.0 };
                    out.set_y(i, c, data.y(i, c) + sign * z);
                    outliers.push((i, c));
                }
            }
        }
        Contamination::Focused { fraction, channel } => {
            let chosen = select(&data.observed_in_channel(*channel), *fraction, rng);
            let stats: Vec<(f64, f64)> = (0..data.d())
                .map(|j| median_mad(&data.inputs().column(j).iter().copied().collect::<Vec<_>>()))
                .collect();
            let ys: Vec<f64> = data.observed_in_channel(*channel).iter().map(|&i| data.y(i, *channel)).collect();
            let (_, mad_y) = median_mad(&ys);
            for &i in &chosen {
                let x: Vec<f64> = stats.iter().map(|&(med, mad)| med + draw(rng, (0.0, 0.1 * mad))).collect();
                out.set_input_row(i, &x);
                out.set_y(i, *channel, 6.0 + draw(rng, (0.0, 0.1 * mad_y)));
                outliers.push((i, *channel));
            }
        }
        Contamination::FocusedInterval { fraction, channel, interval, mean, var } => {
            let candidates = data.observed_in_channel(*channel);
            let chosen = select(&candidates, *fraction, rng);
            for &i in &chosen {
                let x: Vec<f64> = (0..data.d()).map(|_| draw(rng, *interval)).collect();
                out.set_input_row(i, &x);
            }
            replace_focused_targets(&mut out, &chosen, *channel, *mean, *var, rng)?;
            outliers.extend(chosen.iter().map(|&i| (i, *channel)));
        }
        Contamination::IntervalShift { fraction, channel, magnitude } => {
            let m = reference.prior_mean[*channel];
            for i in select(&data.observed_in_channel(*channel), *fraction, rng) {
                let z = draw(rng, *magnitude);
                let y = data.y(i, *channel);
                out.set_y(i, *channel, if y < m { y + z } else { y - z });
                outliers.push((i, *channel));
            }
        }
        Contamination::Mahalanobis { fraction, s, md_range, base_range } => {
            let s = *s;
            let bs = reference.coreg.view((0, 0), (s, s)).into_owned();
            let factor = SpdFactor::new(&bs)?;
            let channels: Vec<usize> = (0..s).collect();
            for i in select(&rows_observing(data, &channels), *fraction, rng) {
                let md = draw(rng, *md_range);
                let v = DVector::from_fn(s, |_, _| draw(rng, *base_range));
                let q = v.dot(&factor.solve_vec(&v));
                let alpha = md / q.sqrt();
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                for c in 0..s {
                    out.set_y(i, c, data.y(i, c) + sign * alpha * v[c]);
                    outliers.push((i, c));
                }
            }
        }
    }
    outliers.sort_unstable();
    Ok(Contaminated { data: out, outliers })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RmseMode {
    /// Square root of the nested mean of squared errors.
    #[default]
    Standard,
    /// The nested mean of squared errors without the square root.
    PaperLiteral,
}

fn check_shapes(a: &DMatrix<f64>, b: &DMatrix<f64>, mask: &DMatrix<bool>) -> Result<()> {
    if a.shape() != b.shape() || a.shape() != mask.shape() {
        return Err(Error::Shape("prediction, truth and mask differ in shape".into()));
    }
    Ok(())
}

/// Mean over rows of the mean over masked-in channels of squared error,
/// square-rooted in [`RmseMode::Standard`].
pub fn rmse(pred: &DMatrix<f64>, truth: &DMatrix<f64>, mask: &DMatrix<bool>, mode: RmseMode) -> Result<f64> {
    check_shapes(pred, truth, mask)?;
    let mut total = 0.0;
    let mut rows = 0usize;
    for i in 0..pred.nrows() {
        let cols: Vec<usize> = (0..pred.ncols()).filter(|&t| mask[(i, t)]).collect();
        if cols.is_empty() {
            continue;
        }
        let se: f64 = cols.iter().map(|&t| (pred[(i, t)] - truth[(i, t)]).powi(2)).sum();
        total += se / cols.len() as f64;
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyData);
    }
    let mse = total / rows as f64;
    Ok(match mode {
        RmseMode::Standard => mse.sqrt(),
        RmseMode::PaperLiteral => mse,
    })
}

/// Mean over masked-in entries of `-log N(truth; mean, var)`.
pub fn nlpd(mean: &DMatrix<f64>, var: &DMatrix<f64>, truth: &DMatrix<f64>, mask: &DMatrix<bool>) -> Result<f64> {
    check_shapes(mean, truth, mask)?;
    check_shapes(var, truth, mask)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for ((&m, &v), (&y, &keep)) in mean.iter().zip(var.iter()).zip(truth.iter().zip(mask.iter())) {
        if !keep {
            continue;
        }
        if !(v > 0.0) {
            return Err(Error::InvalidArgument(format!("predictive variance must be > 0, got {v}")));
        }
        total += 0.5 * (LN_2PI + v.ln() + (y - m) * (y - m) / v);
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyData);
    }
    Ok(total / count as f64)
}

/// Marginal means and variances as `q x T` matrices.
pub fn predictive_grid(pred: &Predictive) -> (DMatrix<f64>, DMatrix<f64>) {
    let (q, t) = (pred.n_points, pred.n_channels);
    (
        DMatrix::from_fn(q, t, |j, c| pred.mean_at(j, c)),
        DMatrix::from_fn(q, t, |j, c| pred.var_at(j, c)),
    )
}

/// Which posterior the influence curve is computed for.
#[derive(Clone, Debug, PartialEq)]
pub enum PifModel {
    Mogp,
    /// Robust posterior; weights are rebuilt from this spec on every
    /// contaminated dataset.
    Morcgp(WeightSpec),
}

/// `KL(clean || contaminated)` of each channel's latent posterior at the
/// training inputs, one row per contamination magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct PifCurve {
    pub magnitudes: Vec<f64>,
    /// `magnitudes.len() x T`.
    pub kl_per_channel: DMatrix<f64>,
    /// Contaminated entry `(m, s)`.
    pub index: (usize, usize),
}

fn latent_posterior(data: &Dataset, params: &IcmParams, model: &PifModel) -> Result<Predictive> {
    match model {
        PifModel::Mogp => mogp_predict(data, params, data.inputs(), false),
        PifModel::Morcgp(spec) => {
            let w = build_weight_state(data, params, spec)?;
            FittedState::new(data, params, &w)?.predict(data.inputs(), false)
        }
    }
}

/// Posterior influence of moving `y_{m,s}` by each of `magnitudes`.
pub fn pif_curve(
    data: &Dataset,
    params: &IcmParams,
    model: &PifModel,
    m: usize,
    s: usize,
    magnitudes: &[f64],
) -> Result<PifCurve> {
    if m >= data.n() || s >= data.t() || !data.is_observed(m, s) {
        return Err(Error::InvalidArgument(format!("entry ({m}, {s}) is not an observed entry")));
    }
    if magnitudes.is_empty() {
        return Err(Error::InvalidArgument("no magnitudes given".into()));
    }
    if magnitudes.iter().any(|d| !(*d >= 0.0 && d.is_finite())) || magnitudes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("magnitudes must be non-negative and strictly increasing".into()));
    }
    let t = data.t();
    let clean = latent_posterior(data, params, model)?;
    let clean_channels: Vec<Predictive> = (0..t).map(|c| clean.channel(c)).collect();
    let mut kl = DMatrix::zeros(magnitudes.len(), t);
    for (r, &delta) in magnitudes.iter().enumerate() {
        let mut dirty = data.clone();
        dirty.set_y(m, s, data.y(m, s) + delta);
        let post = latent_posterior(&dirty, params, model)?;
        for (c, p) in clean_channels.iter().enumerate() {
            kl[(r, c)] = kl_gaussian(p, &post.channel(c))?;
        }
    }
    Ok(PifCurve { magnitudes: magnitudes.to_vec(), kl_per_channel: kl, index: (m, s) })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Models compared in a benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Standard MOGP.
    Mogp,
    /// Robust MOGP with conditional-mean-centred weights.
    Morcgp,
    /// Robust MOGP with prior-mean-centred (single-output style) weights.
    MorcgpNaive,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Mogp => "mogp",
            Method::Morcgp => "morcgp",
            Method::MorcgpNaive => "morcgp-naive",
        }
    }

    fn weight_kind(self) -> Option<WeightKind> {
        match self {
            Method::Mogp => None,
            Method::Morcgp => Some(WeightKind::Conditional),
            Method::MorcgpNaive => Some(WeightKind::PriorMean),
        }
    }
}

/// Prior mean used by the fitted models.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPrior {
    #[default]
    Zero,
    Empirical,
}

impl ModelPrior {
    pub fn resolve(self, t: usize) -> PriorMean {
        match self {
            ModelPrior::Zero => PriorMean::zero(t),
            ModelPrior::Empirical => PriorMean::Empirical,
        }
    }
}

/// What the predictions are scored against.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EvalTarget {
    /// Latent values at the training inputs, scored with the latent
    /// predictive (no observation noise).
    #[default]
    Latent,
    /// Clean noisy observations at `n-test` extra inputs drawn with the
    /// training set, scored with the noisy predictive.
    HeldOut {
        #[serde(rename = "n-test")]
        n_test: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Scenario {
    pub name: String,
    pub generator: GeneratorConfig,
    #[serde(default = "no_contamination")]
    pub contamination: Contamination,
}

fn no_contamination() -> Contamination {
    Contamination::None
}

/// A generated benchmark problem.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub train: Dataset,
    pub outliers: Vec<(usize, usize)>,
    /// Latent values at the training inputs.
    pub latent: DMatrix<f64>,
    /// Held-out clean observations, when requested.
    pub test: Option<Dataset>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Scenario {
    /// Draws the dataset for `seed`. The clean sample depends only on the
    /// generator and the seed, so scenarios sharing a generator see the same
    /// clean data; contamination uses its own stream.
    pub fn generate(&self, seed: u64, n_test: usize) -> Result<Problem> {
        let g = &self.generator;
        g.validate()?;
        self.contamination.validate(g.t())?;
        let mut sample_rng = stream_rng(seed, 1);
        let mut dirty_rng = stream_rng(seed, 2);
        let mut x = uniform_inputs(g, g.n + n_test, &mut sample_rng);
        let mut focused_rows = Vec::new();
        if let Contamination::FocusedInterval { fraction, interval, .. } = &self.contamination {
            let mut train_x = x.rows(0, g.n).into_owned();
            focused_rows = focused_interval_inputs(&mut train_x, *fraction, *interval, &mut dirty_rng);
            x.rows_mut(0, g.n).copy_from(&train_x);
        }
        let full = sample_at(g, x, &mut sample_rng)?;
        let train = Dataset::complete(
            full.data.inputs().rows(0, g.n).into_owned(),
            full.data.outputs().rows(0, g.n).into_owned(),
        )?;
        let latent = full.latent.rows(0, g.n).into_owned();
        let test = if n_test > 0 {
            Some(Dataset::complete(
                full.data.inputs().rows(g.n, n_test).into_owned(),
                full.data.outputs().rows(g.n, n_test).into_owned(),
            )?)
        } else {
            None
        };
        let (train, outliers) = match &self.contamination {
            Contamination::FocusedInterval { channel, mean, var, .. } => {
                let mut train = train;
                replace_focused_targets(&mut train, &focused_rows, *channel, *mean, *var, &mut dirty_rng)?;
                let mut o: Vec<(usize, usize)> = focused_rows.iter().map(|&i| (i, *channel)).collect();
                o.sort_unstable();
                (train, o)
            }
            scheme => {
                let reference = Reference { prior_mean: g.mean_vector(), coreg: g.coreg_matrix()? };
                let c = contaminate(&train, scheme, &reference, &mut dirty_rng)?;
                (c.data, c.outliers)
            }
        };
        Ok(Problem { train, outliers, latent, test })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct BenchmarkConfig {
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Outlier fraction `epsilon_t` given to the weights (same for every channel).
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub prior_mean: ModelPrior,
    /// Fit hyperparameters; when false the generating parameters are used.
    #[serde(default = "default_true")]
    pub optimize: bool,
    #[serde(default)]
    pub eval: EvalTarget,
    #[serde(default)]
    pub rmse_mode: RmseMode,
    /// Record wall-clock fit times (otherwise 0, keeping output reproducible).
    #[serde(default)]
    pub timings: bool,
    #[serde(default)]
    pub fit: FitConfig,
}

fn default_epsilon() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument("benchmark needs scenarios, methods and seeds".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be in (0, 1), got {}", self.epsilon)));
        }
        for s in &self.scenarios {
            s.generator.validate()?;
            s.contamination.validate(s.generator.t())?;
        }
        Ok(())
    }

    fn n_test(&self) -> usize {
        match self.eval {
            EvalTarget::Latent => 0,
            EvalTarget::HeldOut { n_test } => n_test,
        }
    }
}

/// One fit-and-score run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub rmse: f64,
    pub nlpd: f64,
    pub fit_seconds: f64,
    pub n_failures: usize,
}

/// Mean and sample standard deviation over the successful seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: String,
    pub n_runs: usize,
    pub n_failures: usize,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub nlpd_mean: f64,
    pub nlpd_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResults {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

/// A model ready to predict.
pub enum FittedModel {
    Mogp { data: Dataset, params: IcmParams },
    Morcgp(Box<FittedState>),
}

impl FittedModel {
    pub fn predict(&self, x: &DMatrix<f64>, include_noise: bool) -> Result<Predictive> {
        match self {
            FittedModel::Mogp { data, params } => mogp_predict(data, params, x, include_noise),
            FittedModel::Morcgp(state) => state.predict(x, include_noise),
        }
    }

    pub fn params(&self) -> &IcmParams {
        match self {
            FittedModel::Mogp { params, .. } => params,
            FittedModel::Morcgp(state) => state.params(),
        }
    }
}

/// Fits (or, without optimization, instantiates at the generating
/// parameters) one method on `data`.
pub fn fit_method(
    data: &Dataset,
    method: Method,
    generator: &GeneratorConfig,
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<FittedModel> {
    let t = data.t();
    let prior = config.prior_mean.resolve(t);
    let spec = method.weight_kind().map(|k| WeightSpec::new(k, vec![config.epsilon; t]));
    if !config.optimize {
        let params = generator.true_params(prior)?;
        return Ok(match spec {
            None => FittedModel::Mogp { data: data.clone(), params },
            Some(spec) => {
                let spec = if spec.kind == WeightKind::Conditional { spec.with_center_cov(params.output_cov()) } else { spec };
                let w = build_weight_state(data, &params, &spec)?;
                FittedModel::Morcgp(Box::new(FittedState::new(data, &params, &w)?))
            }
        });
    }
    let fit_config = FitConfig { seed, prior_mean: Some(prior), ..config.fit.clone() };
    match spec {
        None => {
            let r = fit(data, None, &WeightSpec::constant(t), FitMethod::MogpMl, &fit_config)?;
            Ok(FittedModel::Mogp { data: data.clone(), params: r.params })
        }
        Some(spec) => {
            let r = fit(data, None, &spec, FitMethod::MorcgpWloo, &fit_config)?;
            Ok(FittedModel::Morcgp(Box::new(FittedState::new(data, &r.params, &r.weights)?)))
        }
    }
}

/// RMSE and NLPD of `model` on `problem` under the configured target.
pub fn score(model: &FittedModel, problem: &Problem, config: &BenchmarkConfig) -> Result<(f64, f64)> {
    let (x, truth, noisy) = match (&config.eval, &problem.test) {
        (EvalTarget::HeldOut { .. }, Some(test)) => (test.inputs(), test.outputs().clone(), true),
        _ => (problem.train.inputs(), problem.latent.clone(), false),
    };
    let pred = model.predict(x, noisy)?;
    let (mean, var) = predictive_grid(&pred);
    let mask = DMatrix::from_element(truth.nrows(), truth.ncols(), true);
    Ok((rmse(&mean, &truth, &mask, config.rmse_mode)?, nlpd(&mean, &var, &truth, &mask)?))
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every (scenario, seed, method) combination. Failed runs are recorded
/// with NaN metrics and counted, not propagated. Records are ordered by
/// scenario, then method, then seed, in configuration order.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkResults> {
    config.validate()?;
    let mut records = Vec::new();
    for scenario in &config.scenarios {
        let mut per_method: Vec<Vec<RunRecord>> = vec![Vec::new(); config.methods.len()];
        for &seed in &config.seeds {
            let problem = scenario.generate(seed, config.n_test());
            for (k, &method) in config.methods.iter().enumerate() {
                let start = Instant::now();
                let outcome = problem.as_ref().map_err(Clone::clone).and_then(|p| {
                    let model = fit_method(&p.train, method, &scenario.generator, config, seed)?;
                    score(&model, p, config)
                });
                let fit_seconds = if config.timings { start.elapsed().as_secs_f64() } else { 0.0 };
                let (rmse, nlpd, n_failures) = match outcome {
                    Ok((r, n)) if r.is_finite() && n.is_finite() => (r, n, 0),
                    Ok(_) => (f64::NAN, f64::NAN, 1),
                    Err(e) => {
                        log::warn!("{} / {} / seed {seed} failed: {e}", scenario.name, method.label());
                        (f64::NAN, f64::NAN, 1)
                    }
                };
                per_method[k].push(RunRecord {
                    scenario: scenario.name.clone(),
                    method: method.label().to_string(),
                    seed,
                    rmse,
                    nlpd,
                    fit_seconds,
                    n_failures,
                });
            }
        }
        records.extend(per_method.into_iter().flatten());
    }
    let mut summary = Vec::new();
    for scenario in &config.scenarios {
        for method in &config.methods {
            let runs: Vec<&RunRecord> =
                records.iter().filter(|r| r.scenario == scenario.name && r.method == method.label()).collect();
            let ok: Vec<&&RunRecord> = runs.iter().filter(|r| r.n_failures == 0).collect();
            let (rmse_mean, rmse_std) = mean_std(&ok.iter().map(|r| r.rmse).collect::<Vec<_>>());
            let (nlpd_mean, nlpd_std) = mean_std(&ok.iter().map(|r| r.nlpd).collect::<Vec<_>>());
            summary.push(SummaryRow {
                scenario: scenario.name.clone(),
                method: method.label().to_string(),
                n_runs: runs.len(),
                n_failures: runs.len() - ok.len(),
                rmse_mean,
                rmse_std,
                nlpd_mean,
                nlpd_std,
            });
        }
    }
    Ok(BenchmarkResults { records, summary })
}

/// Ready-made scenarios.
pub mod presets {
    use super::*;

    /// `N = 100` inputs on `[-5, 5]`, `T = 3`, `l = 1`, noise variance 0.1.
    pub fn synthetic_icm_generator() -> GeneratorConfig {
        GeneratorConfig {
            n: 100,
            d: 1,
            input_range: (-5.0, 5.0),
            lengthscale: 1.0,
            coreg: vec![vec![1.0, 0.9, 0.7], vec![0.9, 1.0, 0.8], vec![0.7, 0.8, 1.0]],
            noise_var: vec![0.1; 3],
            mean: None,
        }
    }

    /// 10% of channel 0 shifted by `U[2, 3]` towards the other side of the prior mean.
    pub fn interval_shift() -> Contamination {
        Contamination::IntervalShift { fraction: 0.1, channel: 0, magnitude: (2.0, 3.0) }
    }

    /// Clean and contaminated versions of the synthetic ICM problem, all three
    /// methods, fitted hyperparameters, zero prior mean.
    pub fn synthetic_benchmark(seeds: Vec<u64>) -> BenchmarkConfig {
        BenchmarkConfig {
            scenarios: vec![
                Scenario { name: "clean".into(), generator: synthetic_icm_generator(), contamination: Contamination::None },
                Scenario { name: "contaminated".into(), generator: synthetic_icm_generator(), contamination: interval_shift() },
            ],
            methods: vec![Method::Mogp, Method::Morcgp, Method::MorcgpNaive],
            seeds,
            epsilon: 0.1,
            prior_mean: ModelPrior::Zero,
            optimize: true,
            eval: EvalTarget::Latent,
            rmse_mode: RmseMode::Standard,
            timings: false,
            fit: FitConfig::default(),
        }
    }

    /// `N = 120` on `[0, 1]`, `T = 2`, a cluster of channel-0 outliers in `[0.42, 0.58]`.
    pub fn focused_interval_scenario() -> Scenario {
        Scenario {
            name: "focused-interval".into(),
            generator: GeneratorConfig {
                n: 120,
                d: 1,
                input_range: (0.0, 1.0),
                lengthscale: 0.1,
                coreg: vec![vec![2.0, 1.25], vec![1.25, 1.0]],
                noise_var: vec![0.05; 2],
                mean: None,
            },
            contamination: Contamination::FocusedInterval {
                fraction: 0.1,
                channel: 0,
                interval: (0.42, 0.58),
                mean: 2.5,
                var: 0.5,
            },
        }
    }

    /// `N = 80` on `[0, 1]`, `T = 10`, `B_ij = 1 - 0.1 |i - j|`, joint outliers
    /// in the first `s` channels of 10% of the rows.
    pub fn multivariate_outlier_scenario(s: usize) -> Scenario {
        let t = 10;
        Scenario {
            name: format!("mahalanobis-s{s}"),
            generator: GeneratorConfig {
                n: 80,
                d: 1,
                input_range: (0.0, 1.0),
                lengthscale: 0.1,
                coreg: (0..t).map(|i| (0..t).map(|j| 1.0 - 0.1 * (i as f64 - j as f64).abs()).collect()).collect(),
                noise_var: vec![0.05; t],
                mean: None,
            },
            contamination: Contamination::Mahalanobis {
                fraction: 0.1,
                s,
                md_range: (10.0, 15.0),
                base_range: (0.5, 1.5),
            },
        }
    }

    /// Both known-parameter studies: generating hyperparameters, empirical prior mean.
    pub fn known_parameter_benchmark(scenarios: Vec<Scenario>, seeds: Vec<u64>) -> BenchmarkConfig {
        BenchmarkConfig {
            scenarios,
            methods: vec![Method::Mogp, Method::Morcgp],
            seeds,
            epsilon: 0.1,
            prior_mean: ModelPrior::Empirical,
            optimize: false,
            eval: EvalTarget::Latent,
            rmse_mode: RmseMode::Standard,
            timings: false,
            fit: FitConfig::default(),
        }
    }
}
