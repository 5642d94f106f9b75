//! Hyperparameter estimation: the closed-form leave-one-out predictive of the
//! robust posterior, the weighted LOO objective, the MOGP marginal likelihood,
//! and the two-step robust-scatter-then-optimize fitting procedure.

pub mod encoding;
pub mod gradient;
pub mod lbfgs;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FlatIndex};
use crate::error::{Error, Result};
use crate::inference::FittedState;
use crate::kernel::{block_gram, restrict_observed, IcmParams, PriorMean};
use crate::linalg::{project_psd, select_rows_cols, SpdFactor};
use crate::robust_cov::{robust_output_scatter, McdConfig, ScatterSource};
use crate::weights::{build_weight_state, WeightKind, WeightSpec, WeightState};

pub use encoding::ParamVector;
pub use gradient::{marginal_nll_with_gradient, NoiseScaling};
pub use lbfgs::{Bounds, LbfgsConfig, LbfgsResult};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Latent LOO variances below this are floored (and flagged when negative).
pub const LOO_VAR_FLOOR: f64 = 1e-12;

fn log_normal(y: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (y - mean) * (y - mean) / var)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LooEntry {
    pub i: usize,
    pub t: usize,
    pub mean: f64,
    /// Predictive variance including the channel noise.
    pub var: f64,
    pub log_density: f64,
    /// Latent variance came out negative and was floored.
    pub flagged: bool,
}

/// LOO predictive of every observed entry from a single factorization.
pub fn loo_closed_form(state: &FittedState) -> Vec<LooEntry> {
    let data = state.data();
    let params = state.params();
    let n = data.n();
    let nobs = state.observed().len();
    let inv_diag = state.factor().inverse_diagonal();
    let alpha = state.alpha();
    let z = state.z();
    let m = state.m_observed();
    let jitter = state.factor().jitter();
    let mut out = Vec::with_capacity(nobs);
    for (r, &k) in state.observed().iter().enumerate() {
        let FlatIndex { obs, channel } = FlatIndex::from_flat(k, n);
        let a_kk = inv_diag[r];
        let mean = z[r] + m[r] - alpha[r] / a_kk;
        let mut latent = 1.0 / a_kk - state.noise_diag()[r] - jitter;
        let flagged = latent < 0.0 && latent.abs() > 1e-10 / a_kk;
        if latent < LOO_VAR_FLOOR {
            latent = LOO_VAR_FLOOR;
        }
        let var = latent + params.noise_var(channel);
        let y = data.y(obs, channel);
        out.push(LooEntry { i: obs, t: channel, mean, var, log_density: log_normal(y, mean, var), flagged });
    }
    out
}

/// `sum (w_{i,t} / beta_t)^2 log p(y_{i,t} | rest)` over unflagged entries.
pub fn wloo_objective(entries: &[LooEntry], weights: &WeightState, beta: &DVector<f64>) -> f64 {
    entries
        .iter()
        .filter(|e| !e.flagged)
        .map(|e| {
            let u = weights.weights[(e.i, e.t)] / beta[e.t];
            u * u * e.log_density
        })
        .sum()
}

/// Negative log marginal likelihood of the observed entries under the MOGP.
pub fn marginal_nll(data: &Dataset, params: &IcmParams) -> Result<f64> {
    let n = data.n();
    let observed = restrict_observed(data.mask())?;
    let means = params.prior_mean.resolve(data)?;
    let mut a = select_rows_cols(&block_gram(data.inputs(), params), &observed);
    for (r, &k) in observed.iter().enumerate() {
        a[(r, r)] += params.noise_var(k / n);
    }
    let resid = DVector::from_iterator(
        observed.len(),
        observed.iter().map(|&k| {
            let FlatIndex { obs, channel } = FlatIndex::from_flat(k, n);
            data.y(obs, channel) - means[channel]
        }),
    );
    let factor = SpdFactor::new(&a)?;
    let quad = resid.dot(&factor.solve_vec(&resid));
    Ok(0.5 * (quad + factor.log_det() + observed.len() as f64 * LN_2PI))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    /// Standard MOGP, marginal likelihood.
    MogpMl,
    /// Robust MOGP, weighted leave-one-out objective.
    MorcgpWloo,
}

/// What is held fixed about the weights while the hyperparameters move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightFreeze {
    /// The standardized weights `w / beta` stay fixed and `beta = sigma / sqrt(2)`
    /// follows the current noise level.
    Standardized,
    /// `w` stays fixed; only the objective normalizer `beta` follows sigma.
    Absolute,
    /// `w` and the normalizer `beta` both stay at their initial values.
    AbsoluteFixedBeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct FitConfig {
    pub optimizer: LbfgsConfig,
    pub mcd: McdConfig,
    pub freeze: WeightFreeze,
    /// Upper bound on every noise variance.
    pub noise_var_cap: Option<f64>,
    /// Lower bound on every noise standard deviation.
    pub min_noise_std: f64,
    pub lengthscale_range: Option<(f64, f64)>,
    pub max_restarts: usize,
    pub seed: u64,
    /// Use finite differences instead of the analytic gradient.
    pub finite_differences: bool,
    /// Apply the `(w / beta)^2` coefficients in the LOO objective.
    pub weighted_objective: bool,
    /// Prior mean used when no initial parameters are given.
    pub prior_mean: Option<PriorMean>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            optimizer: LbfgsConfig::default(),
            mcd: McdConfig::default(),
            freeze: WeightFreeze::Standardized,
            noise_var_cap: None,
            min_noise_std: 1e-4,
            lengthscale_range: None,
            max_restarts: 3,
            seed: 0,
            finite_differences: false,
            weighted_objective: true,
            prior_mean: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitDiagnostics {
    pub method: FitMethod,
    /// Final objective value (maximized w-LOO, or minimized negative log marginal likelihood).
    pub objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub restarts: usize,
    pub flagged_loo_entries: usize,
    pub scatter_source: Option<String>,
    pub objective_trace: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: IcmParams,
    /// Weights re-estimated with the optimized parameters.
    pub weights: WeightState,
    /// Spec the final weights were built from (centre covariance filled in).
    pub spec: WeightSpec,
    pub diagnostics: FitDiagnostics,
}

fn median_pairwise_distance(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in 0..i {
            d.push((x.row(i) - x.row(j)).norm());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let med = d[d.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Starting point: median pairwise input distance, half the channel standard
/// deviations, and `B` from the output scatter minus the noise.
pub fn default_init(data: &Dataset, prior_mean: PriorMean, scatter: &DMatrix<f64>) -> Result<IcmParams> {
    let t = data.t();
    let noise = DVector::from_fn(t, |s, _| (0.5 * data.channel_std(s)).max(1e-3));
    let mut b = scatter.clone();
    for s in 0..t {
        b[(s, s)] -= noise[s] * noise[s];
    }
    let b = project_psd(&b, 1e-6);
    IcmParams::from_coreg(median_pairwise_distance(data.inputs()), &b, noise, prior_mean)
}

fn bounds_for(t: usize, config: &FitConfig) -> Bounds {
    let mut b = vec![(f64::NEG_INFINITY, f64::INFINITY); ParamVector::len_for(t)];
    if let Some((lo, hi)) = config.lengthscale_range {
        b[0] = (lo.ln(), hi.ln());
    }
    let hi = config.noise_var_cap.map_or(f64::INFINITY, |c| 0.5 * c.ln());
    let lo = config.min_noise_std.max(f64::MIN_POSITIVE).ln();
    for s in 0..t {
        b[1 + s] = (lo, hi);
    }
    b
}

/// Weights, objective normalizer and gradient scaling used by the weighted
/// LOO objective at `params` under the given freezing rule.
fn frozen_at(params: &IcmParams, frozen: &WeightState, freeze: WeightFreeze) -> (WeightState, DVector<f64>, NoiseScaling) {
    match freeze {
        WeightFreeze::Standardized if frozen.beta_tracks_noise => {
            let w = frozen.rescaled(params);
            let beta = w.beta.clone();
            (w, beta, NoiseScaling { nd_power: 2.0, coef_power: 0.0 })
        }
        WeightFreeze::Absolute => (
            frozen.clone(),
            crate::weights::default_beta(params),
            NoiseScaling { nd_power: 4.0, coef_power: -2.0 },
        ),
        _ => (frozen.clone(), frozen.beta.clone(), NoiseScaling { nd_power: 4.0, coef_power: 0.0 }),
    }
}

/// Weighted LOO objective (to be maximized) for `params` with frozen weights,
/// and the number of flagged entries.
pub fn wloo_at(data: &Dataset, params: &IcmParams, frozen: &WeightState, freeze: WeightFreeze) -> Result<(f64, usize)> {
    loo_objective_at(data, params, frozen, freeze, true)
}

/// [`wloo_at`] together with its gradient in the encoded coordinates.
pub fn wloo_gradient_at(
    data: &Dataset,
    params: &IcmParams,
    frozen: &WeightState,
    freeze: WeightFreeze,
) -> Result<(f64, DVector<f64>)> {
    loo_gradient_at(data, params, frozen, freeze, true)
}

fn loo_coefficients(entries: &[LooEntry], weights: &WeightState, beta: &DVector<f64>, weighted: bool) -> DVector<f64> {
    DVector::from_iterator(
        entries.len(),
        entries.iter().map(|e| if weighted { (weights.weights[(e.i, e.t)] / beta[e.t]).powi(2) } else { 1.0 }),
    )
}

/// LOO objective of the robust posterior; `weighted = false` drops the
/// `(w / beta)^2` coefficients.
pub fn loo_objective_at(
    data: &Dataset,
    params: &IcmParams,
    frozen: &WeightState,
    freeze: WeightFreeze,
    weighted: bool,
) -> Result<(f64, usize)> {
    let (weights, beta, _) = frozen_at(params, frozen, freeze);
    let state = FittedState::new(data, params, &weights)?;
    let entries = loo_closed_form(&state);
    let flagged = entries.iter().filter(|e| e.flagged).count();
    let value = if weighted {
        wloo_objective(&entries, &weights, &beta)
    } else {
        entries.iter().filter(|e| !e.flagged).map(|e| e.log_density).sum()
    };
    Ok((value, flagged))
}

fn loo_gradient_at(
    data: &Dataset,
    params: &IcmParams,
    frozen: &WeightState,
    freeze: WeightFreeze,
    weighted: bool,
) -> Result<(f64, DVector<f64>)> {
    let (weights, beta, mut scaling) = frozen_at(params, frozen, freeze);
    if !weighted {
        scaling.coef_power = 0.0;
    }
    let state = FittedState::new(data, params, &weights)?;
    let entries = loo_closed_form(&state);
    let coef = loo_coefficients(&entries, &weights, &beta, weighted);
    Ok(gradient::wloo_with_gradient(&state, &entries, &coef, scaling))
}

/// Two-step fit: robust scatter and frozen weights, quasi-Newton on the
/// objective, then weights re-estimated at the optimum.
pub fn fit(
    data: &Dataset,
    init: Option<IcmParams>,
    spec: &WeightSpec,
    method: FitMethod,
    config: &FitConfig,
) -> Result<FitResult> {
    let t = data.t();
    spec.validate(t)?;
    let prior_mean = match (&init, &config.prior_mean) {
        (Some(p), _) => p.prior_mean.clone(),
        (None, Some(m)) => m.clone(),
        (None, None) => PriorMean::zero(t),
    };

    let needs_scatter = init.is_none()
        || (method == FitMethod::MorcgpWloo && spec.kind == WeightKind::Conditional && spec.center_cov.is_none());
    let scatter = if needs_scatter {
        Some(robust_output_scatter(data, &config.mcd, config.seed)?)
    } else {
        None
    };
    let init = match init {
        Some(p) => p,
        None => default_init(data, prior_mean.clone(), &scatter.as_ref().expect("computed above").scatter)?,
    };
    if init.t() != t {
        return Err(Error::Shape("initial parameters and data disagree on T".into()));
    }

    let mut step1_spec = spec.clone();
    if step1_spec.kind == WeightKind::Conditional && step1_spec.center_cov.is_none() {
        step1_spec.center_cov = scatter.as_ref().map(|s| s.scatter.clone());
    }
    let frozen = match method {
        FitMethod::MogpMl => None,
        FitMethod::MorcgpWloo => Some(build_weight_state(data, &init, &step1_spec)?),
    };

    let objective = |params: &IcmParams| -> Result<(f64, usize)> {
        match (&frozen, method) {
            (Some(w), FitMethod::MorcgpWloo) => {
                let (v, flagged) = loo_objective_at(data, params, w, config.freeze, config.weighted_objective)?;
                Ok((-v, flagged))
            }
            _ => Ok((marginal_nll(data, params)?, 0)),
        }
    };
    let to_min = |x: &DVector<f64>| -> f64 {
        ParamVector { values: x.clone(), t }
            .decode(&prior_mean)
            .and_then(|p| objective(&p))
            .map(|(v, _)| v)
            .unwrap_or(f64::INFINITY)
    };

    let to_grad = |x: &DVector<f64>| -> DVector<f64> {
        let len = x.len();
        let nan = || DVector::from_element(len, f64::NAN);
        let Ok(params) = (ParamVector { values: x.clone(), t }).decode(&prior_mean) else {
            return nan();
        };
        let r = match (&frozen, method) {
            (Some(w), FitMethod::MorcgpWloo) => loo_gradient_at(data, &params, w, config.freeze, config.weighted_objective).map(|(_, g)| -g),
            _ => marginal_nll_with_gradient(data, &params).map(|(_, g)| g),
        };
        match r {
            Ok(mut g) => {
                ParamVector { values: x.clone(), t }.unflip_gradient(&mut g);
                g
            }
            Err(_) => nan(),
        }
    };

    let bounds = bounds_for(t, config);
    let mut x0 = ParamVector::encode(&init).values;
    for (v, (lo, hi)) in x0.iter_mut().zip(&bounds) {
        *v = v.clamp(*lo, *hi);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let jitter = Normal::new(0.0, 0.1).expect("valid normal");
    let mut restarts = 0;
    let result = loop {
        let r = if config.finite_differences {
            lbfgs::minimize_fd(to_min, &x0, Some(&bounds), &config.optimizer)
        } else {
            lbfgs::minimize(to_min, to_grad, &x0, Some(&bounds), &config.optimizer)
        };
        if r.f.is_finite() {
            break r;
        }
        if restarts == config.max_restarts {
            return Err(Error::Optimizer(format!(
                "objective not finite after {restarts} restarts"
            )));
        }
        restarts += 1;
        log::warn!("non-finite objective at the initial point; restart {restarts}");
        for v in x0.iter_mut() {
            *v += jitter.sample(&mut rng);
        }
    };

    let params = ParamVector { values: result.x.clone(), t }.decode(&prior_mean)?;
    let (_, flagged) = objective(&params)?;

    let mut final_spec = spec.clone();
    if final_spec.kind == WeightKind::Conditional && spec.center_cov.is_none() {
        final_spec.center_cov = Some(params.output_cov());
    }
    let weights = match method {
        FitMethod::MogpMl => build_weight_state(data, &params, &WeightSpec::constant(t))?,
        FitMethod::MorcgpWloo => build_weight_state(data, &params, &final_spec)?,
    };
    let objective_value = match method {
        FitMethod::MorcgpWloo => -result.f,
        FitMethod::MogpMl => result.f,
    };
    let trace = match method {
        FitMethod::MorcgpWloo => result.trace.iter().map(|v| -v).collect(),
        FitMethod::MogpMl => result.trace.clone(),
    };
    Ok(FitResult {
        params,
        weights,
        spec: if method == FitMethod::MogpMl { WeightSpec::constant(t) } else { final_spec },
        diagnostics: FitDiagnostics {
            method,
            objective: objective_value,
            iterations: result.iterations,
            evaluations: result.evaluations,
            converged: result.converged,
            restarts,
            flagged_loo_entries: flagged,
            scatter_source: scatter.map(|s| match s.source {
                ScatterSource::Mcd => "fast-mcd".to_string(),
                ScatterSource::MadFallback => "mad-fallback".to_string(),
            }),
            objective_trace: trace,
        },
    })
}
