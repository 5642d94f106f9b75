//! Fast minimum covariance determinant (FastMCD) estimator of location and
//! scatter, used to centre the conditional weights before any
//! hyperparameters are fitted.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::SpdFactor;

#[derive(Clone, Debug, PartialEq)]
pub struct RobustEstimate {
    pub location: DVector<f64>,
    /// Consistency-corrected scatter.
    pub scatter: DMatrix<f64>,
    /// Sorted row indices of the minimum-determinant subset.
    pub support: Vec<usize>,
    /// Determinant of the raw (uncorrected) scatter over `support`.
    pub determinant: f64,
    pub consistency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct McdConfig {
    /// Subset size; `None` means `ceil(0.75 M)` for `M` complete rows.
    pub h: Option<usize>,
    pub n_starts: usize,
    pub n_refine: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for McdConfig {
    fn default() -> Self {
        Self { h: None, n_starts: 50, n_refine: 10, max_iter: 100, tol: 1e-9 }
    }
}

/// Mean and ML covariance of a subset of rows, with the log-determinant.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetFit {
    pub location: DVector<f64>,
    pub scatter: DMatrix<f64>,
    pub determinant: f64,
}

pub fn subset_fit(y: &DMatrix<f64>, subset: &[usize]) -> SubsetFit {
    let t = y.ncols();
    let h = subset.len() as f64;
    let mut location = DVector::zeros(t);
    for &i in subset {
        location += y.row(i).transpose();
    }
    location /= h;
    let mut scatter = DMatrix::zeros(t, t);
    for &i in subset {
        let r = y.row(i).transpose() - &location;
        scatter += &r * r.transpose();
    }
    scatter /= h;
    let determinant = scatter.determinant().max(0.0);
    SubsetFit { location, scatter, determinant }
}

/// Squared Mahalanobis distances of every row under `fit`.
fn mahalanobis_sq(y: &DMatrix<f64>, fit: &SubsetFit) -> Result<Vec<f64>> {
    let factor = SpdFactor::with_levels(&fit.scatter, &[0.0, 1e-8])
        .map_err(|_| Error::Singular("scatter matrix is singular".into()))?;
    let centred = DMatrix::from_fn(y.ncols(), y.nrows(), |t, i| y[(i, t)] - fit.location[t]);
    let z = factor.solve_lower(&centred);
    Ok((0..y.nrows()).map(|i| z.column(i).norm_squared()).collect())
}

/// Indices of the `h` smallest values, ties broken by lowest index, sorted.
fn smallest(dist: &[f64], h: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let mut out = order[..h].to_vec();
    out.sort_unstable();
    out
}

/// One concentration step: fit `subset`, keep the `h` rows closest to that
/// fit, and return the new subset with its own fit.
pub fn c_step(y: &DMatrix<f64>, subset: &[usize]) -> Result<(Vec<usize>, SubsetFit)> {
    let h = subset.len();
    if h > y.nrows() || h <= y.ncols() {
        return Err(Error::InvalidArgument(format!(
            "subset size {h} must exceed T = {} and not exceed M = {}",
            y.ncols(),
            y.nrows()
        )));
    }
    let fit = subset_fit(y, subset);
    let next = smallest(&mahalanobis_sq(y, &fit)?, h);
    let next_fit = subset_fit(y, &next);
    Ok((next, next_fit))
}

struct Candidate {
    start: usize,
    subset: Vec<usize>,
    fit: SubsetFit,
}

fn start_rng(seed: u64, start: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start as u64 + 1);
    rng
}

/// Random elemental start: a `(T+1)`-subset grown until its scatter is
/// non-singular, then expanded to the `h` nearest rows.
fn initial_subset(y: &DMatrix<f64>, h: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let (m, t) = y.shape();
    let mut perm: Vec<usize> = sample(rng, m, m).into_vec();
    let mut size = (t + 1).min(m);
    loop {
        let fit = subset_fit(y, &perm[..size]);
        if fit.determinant > 1e-300 {
            if let Ok(d) = mahalanobis_sq(y, &fit) {
                return Ok(smallest(&d, h));
            }
        }
        if size == m {
            return Err(Error::Singular("all rows lie in a lower-dimensional subspace".into()));
        }
        size += 1;
        // Draw the next point uniformly among those not used yet.
        let j = rng.random_range(size - 1..m);
        perm.swap(size - 1, j);
    }
}

fn iterate(y: &DMatrix<f64>, mut cand: Candidate, steps: usize, tol: f64) -> Result<Candidate> {
    for _ in 0..steps {
        let (next, fit) = c_step(y, &cand.subset)?;
        let converged = next == cand.subset || (cand.fit.determinant - fit.determinant).abs() < tol;
        cand.subset = next;
        cand.fit = fit;
        if converged {
            break;
        }
    }
    Ok(cand)
}

/// Median-based consistency factor `median(d^2) / chi2_T.ppf(0.5)`.
fn consistency_factor(y: &DMatrix<f64>, fit: &SubsetFit) -> Result<f64> {
    let mut d = mahalanobis_sq(y, fit)?;
    d.sort_by(|a, b| a.total_cmp(b));
    let n = d.len();
    let median = if n % 2 == 1 { d[n / 2] } else { 0.5 * (d[n / 2 - 1] + d[n / 2]) };
    let chi = ChiSquared::new(y.ncols() as f64).expect("positive degrees of freedom");
    let factor = median / chi.inverse_cdf(0.5);
    Ok(if factor > 0.0 && factor.is_finite() { factor } else { 1.0 })
}

/// FastMCD on the rows of `y` (M x T, all entries observed).
pub fn fast_mcd(y: &DMatrix<f64>, h: usize, n_starts: usize, seed: u64) -> Result<RobustEstimate> {
    fast_mcd_with(y, &McdConfig { h: Some(h), n_starts, ..McdConfig::default() }, seed)
}

pub fn fast_mcd_with(y: &DMatrix<f64>, config: &McdConfig, seed: u64) -> Result<RobustEstimate> {
    let (m, t) = y.shape();
    let h = config.h.unwrap_or_else(|| default_h(m));
    if config.n_starts == 0 {
        return Err(Error::InvalidArgument("need at least one start".into()));
    }
    if h > m {
        return Err(Error::InsufficientData(format!("{m} complete rows but h = {h}")));
    }
    if h <= t {
        return Err(Error::InsufficientData(format!("h = {h} must exceed T = {t}")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("FastMCD needs finite, fully observed rows".into()));
    }

    let mut cands = Vec::with_capacity(config.n_starts);
    for start in 0..config.n_starts {
        let mut rng = start_rng(seed, start);
        let subset = initial_subset(y, h, &mut rng)?;
        let fit = subset_fit(y, &subset);
        cands.push(iterate(y, Candidate { start, subset, fit }, 2, 0.0)?);
    }
    cands.sort_by(|a, b| a.fit.determinant.total_cmp(&b.fit.determinant).then(a.start.cmp(&b.start)));
    cands.truncate(config.n_refine.max(1));
    let mut best: Option<Candidate> = None;
    for cand in cands {
        let done = iterate(y, cand, config.max_iter, config.tol)?;
        let better = match &best {
            None => true,
            Some(b) => {
                done.fit.determinant < b.fit.determinant
                    || (done.fit.determinant == b.fit.determinant && done.start < b.start)
            }
        };
        if better {
            best = Some(done);
        }
    }
    let best = best.expect("at least one candidate");
    let consistency = consistency_factor(y, &best.fit)?;
    Ok(RobustEstimate {
        location: best.fit.location.clone(),
        scatter: &best.fit.scatter * consistency,
        support: best.subset,
        determinant: best.fit.determinant,
        consistency,
    })
}

pub fn default_h(m: usize) -> usize {
    ((0.75 * m as f64).ceil() as usize).min(m)
}

/// How the robust output covariance was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScatterSource {
    Mcd,
    /// Per-channel median absolute deviation, no cross-correlation.
    MadFallback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustScatter {
    pub location: DVector<f64>,
    pub scatter: DMatrix<f64>,
    pub source: ScatterSource,
}

/// Robust estimate of the output covariance `B + Sigma` from the complete
/// rows of `data`, falling back to per-channel MAD when there are too few.
pub fn robust_output_scatter(data: &Dataset, config: &McdConfig, seed: u64) -> Result<RobustScatter> {
    let rows = data.complete_rows();
    let (m, t) = (rows.len(), data.t());
    let h = config.h.unwrap_or_else(|| default_h(m));
    let enough = m > t + 1 && h <= m && h > t && 2 * h >= m + t + 1;
    if enough {
        let y = DMatrix::from_fn(m, t, |a, s| data.y(rows[a], s));
        match fast_mcd_with(&y, &McdConfig { h: Some(h), ..config.clone() }, seed) {
            Ok(est) => {
                return Ok(RobustScatter {
                    location: est.location,
                    scatter: est.scatter,
                    source: ScatterSource::Mcd,
                })
            }
            Err(e) if e.is_numeric() => {
                log::warn!("FastMCD failed ({e}); using per-channel MAD scatter");
            }
            Err(e) => return Err(e),
        }
    } else {
        log::warn!("only {m} complete rows for FastMCD with h = {h}; using per-channel MAD scatter");
    }
    Ok(mad_fallback(data))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median and normal-consistent MAD (1.4826 x MAD) of a sample.
pub fn median_mad(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    let med = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    (med, 1.4826 * median(&mut dev))
}

fn mad_fallback(data: &Dataset) -> RobustScatter {
    let t = data.t();
    let mut location = DVector::zeros(t);
    let mut scatter = DMatrix::zeros(t, t);
    for s in 0..t {
        let vals: Vec<f64> = data.observed_in_channel(s).iter().map(|&i| data.y(i, s)).collect();
        let (med, mad) = median_mad(&vals);
        location[s] = med;
        scatter[(s, s)] = if mad > 0.0 { mad * mad } else { data.channel_std(s).powi(2).max(1e-12) };
    }
    RobustScatter { location, scatter, source: ScatterSource::MadFallback }
}
