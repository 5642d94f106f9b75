//! Closed-form posterior predictives for the standard MOGP and the robust
//! weighted MOGP, plus the Gaussian KL divergence.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, FlatIndex};
use crate::error::{Error, Result};
use crate::kernel::{block_gram, cross_gram_many, restrict_observed, IcmParams};
use crate::linalg::{select_entries, select_rows, select_rows_cols, symmetrize, SpdFactor};
use crate::weights::WeightState;

/// Joint Gaussian over `q` query points and `T` channels, channel-major
/// (entry `t * q + j`).
#[derive(Clone, Debug, PartialEq)]
pub struct Predictive {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub includes_noise: bool,
    pub n_points: usize,
    pub n_channels: usize,
}

impl Predictive {
    pub fn mean_at(&self, j: usize, t: usize) -> f64 {
        self.mean[t * self.n_points + j]
    }

    pub fn var_at(&self, j: usize, t: usize) -> f64 {
        let k = t * self.n_points + j;
        self.cov[(k, k)]
    }

    /// Marginal over channel `t` at all query points.
    pub fn channel(&self, t: usize) -> Predictive {
        let q = self.n_points;
        Predictive {
            mean: self.mean.rows(t * q, q).into_owned(),
            cov: self.cov.view((t * q, t * q), (q, q)).into_owned(),
            includes_noise: self.includes_noise,
            n_points: q,
            n_channels: 1,
        }
    }

    /// Marginal at query point `j` across channels (a `T`-dimensional Gaussian).
    pub fn point(&self, j: usize) -> Predictive {
        let q = self.n_points;
        let idx: Vec<usize> = (0..self.n_channels).map(|t| t * q + j).collect();
        Predictive {
            mean: select_entries(&self.mean, &idx),
            cov: select_rows_cols(&self.cov, &idx),
            includes_noise: self.includes_noise,
            n_points: 1,
            n_channels: self.n_channels,
        }
    }
}

/// Diagonal of `J_W = Sigma W^{-2} / 2` in flat layout; NaN at masked entries.
pub fn assemble_jw(weights: &WeightState, params: &IcmParams) -> Result<DVector<f64>> {
    let (n, t_count) = weights.weights.shape();
    let mut out = DVector::from_element(n * t_count, f64::NAN);
    for t in 0..t_count {
        for i in 0..n {
            let w = weights.weights[(i, t)];
            if w.is_nan() {
                continue;
            }
            if w <= 0.0 {
                return Err(Error::InvalidState(format!("non-positive weight at ({i}, {t})")));
            }
            out[FlatIndex::new(i, t).to_flat(n)] = params.noise_var(t) / (2.0 * w * w);
        }
    }
    Ok(out)
}

/// Pseudo-mean `m_W = m + Sigma (d log W^2 / dy)` in flat layout; NaN at masked entries.
pub fn assemble_mw(weights: &WeightState, params: &IcmParams, data: &Dataset) -> Result<DVector<f64>> {
    let means = params.prior_mean.resolve(data)?;
    let n = data.n();
    Ok(DVector::from_fn(n * data.t(), |k, _| {
        let FlatIndex { obs, channel } = FlatIndex::from_flat(k, n);
        if data.is_observed(obs, channel) {
            means[channel] + params.noise_var(channel) * weights.shrinkage[(obs, channel)]
        } else {
            f64::NAN
        }
    }))
}

/// Factorized robust posterior, ready for prediction.
#[derive(Clone, Debug)]
pub struct FittedState {
    data: Dataset,
    params: IcmParams,
    weights: WeightState,
    observed: Vec<usize>,
    means: DVector<f64>,
    k_obs: DMatrix<f64>,
    /// Diagonal of `Sigma J_W` on the observed entries.
    noise_diag: DVector<f64>,
    /// Prior means on the observed entries.
    m_obs: DVector<f64>,
    z: DVector<f64>,
    factor: SpdFactor,
    alpha: DVector<f64>,
}

impl FittedState {
    pub fn new(data: &Dataset, params: &IcmParams, weights: &WeightState) -> Result<Self> {
        params.validate()?;
        if params.t() != data.t() || weights.weights.shape() != data.outputs().shape() {
            return Err(Error::Shape("data, parameters and weights disagree on shape".into()));
        }
        let n = data.n();
        let observed = restrict_observed(data.mask())?;
        let means = params.prior_mean.resolve(data)?;
        let jw = assemble_jw(weights, params)?;
        let mw = assemble_mw(weights, params, data)?;
        let k_full = block_gram(data.inputs(), params);
        let k_obs = select_rows_cols(&k_full, &observed);
        let noise_diag = DVector::from_iterator(
            observed.len(),
            observed.iter().map(|&k| params.noise_var(k / n) * jw[k]),
        );
        let y = select_entries(&data.y_vec(), &observed);
        let m_obs = DVector::from_iterator(observed.len(), observed.iter().map(|&k| means[k / n]));
        let z = &y - select_entries(&mw, &observed);
        let mut a = k_obs.clone();
        for (r, v) in noise_diag.iter().enumerate() {
            a[(r, r)] += v;
        }
        let factor = SpdFactor::new(&a)?;
        let alpha = factor.solve_vec(&z);
        Ok(Self {
            data: data.clone(),
            params: params.clone(),
            weights: weights.clone(),
            observed,
            means,
            k_obs,
            noise_diag,
            m_obs,
            z,
            factor,
            alpha,
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn params(&self) -> &IcmParams {
        &self.params
    }

    pub fn weights(&self) -> &WeightState {
        &self.weights
    }

    /// Flat indices of the observed entries, in the order used by the solves.
    pub fn observed(&self) -> &[usize] {
        &self.observed
    }

    pub fn prior_means(&self) -> &DVector<f64> {
        &self.means
    }

    pub fn k_observed(&self) -> &DMatrix<f64> {
        &self.k_obs
    }

    pub fn noise_diag(&self) -> &DVector<f64> {
        &self.noise_diag
    }

    pub fn m_observed(&self) -> &DVector<f64> {
        &self.m_obs
    }

    /// Pseudo-residual `y - m_W` on the observed entries.
    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    /// `(K + Sigma J_W)^{-1} z`.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn factor(&self) -> &SpdFactor {
        &self.factor
    }

    /// Robust predictive at the rows of `x_star`.
    pub fn predict(&self, x_star: &DMatrix<f64>, include_noise: bool) -> Result<Predictive> {
        predict_from(
            &self.data,
            &self.params,
            &self.observed,
            &self.factor,
            &self.alpha,
            &self.means,
            x_star,
            include_noise,
        )
    }

    /// Posterior over the latent values at the observed training entries in
    /// the product form `m + K A^{-1} z`, `K A^{-1} Sigma J_W`.
    pub fn training_posterior_product_form(&self) -> (DVector<f64>, DMatrix<f64>) {
        let mean = &self.m_obs + &self.k_obs * &self.alpha;
        let a_inv_sj = self.factor.solve_mat(&DMatrix::from_diagonal(&self.noise_diag));
        let mut cov = &self.k_obs * a_inv_sj;
        symmetrize(&mut cov);
        (mean, cov)
    }
}

#[allow(clippy::too_many_arguments)]
fn predict_from(
    data: &Dataset,
    params: &IcmParams,
    observed: &[usize],
    factor: &SpdFactor,
    alpha: &DVector<f64>,
    means: &DVector<f64>,
    x_star: &DMatrix<f64>,
    include_noise: bool,
) -> Result<Predictive> {
    if x_star.ncols() != data.d() {
        return Err(Error::Shape(format!("query points have {} columns, expected {}", x_star.ncols(), data.d())));
    }
    let q = x_star.nrows();
    let t_count = data.t();
    let ks = select_rows(&cross_gram_many(data.inputs(), x_star, params), observed);
    let kss = block_gram(x_star, params);
    let m_star = DVector::from_fn(q * t_count, |k, _| means[k / q]);
    let mean = m_star + ks.transpose() * alpha;
    let v = factor.solve_lower(&ks);
    let mut cov = kss - v.transpose() * v;
    symmetrize(&mut cov);
    if include_noise {
        for k in 0..q * t_count {
            cov[(k, k)] += params.noise_var(k / q);
        }
    }
    Ok(Predictive { mean, cov, includes_noise: include_noise, n_points: q, n_channels: t_count })
}

/// Robust predictive from a fitted state.
pub fn morcgp_predict(state: &FittedState, x_star: &DMatrix<f64>, include_noise: bool) -> Result<Predictive> {
    state.predict(x_star, include_noise)
}

/// Standard MOGP predictive with observation noise `diag(sigma_t^2)`.
pub fn mogp_predict(
    data: &Dataset,
    params: &IcmParams,
    x_star: &DMatrix<f64>,
    include_noise: bool,
) -> Result<Predictive> {
    params.validate()?;
    if params.t() != data.t() {
        return Err(Error::Shape("parameters and data disagree on T".into()));
    }
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
    let alpha = factor.solve_vec(&resid);
    predict_from(data, params, &observed, &factor, &alpha, &means, x_star, include_noise)
}

/// `KL(p || q)` between two Gaussians of equal dimension.
pub fn kl_gaussian(p: &Predictive, q: &Predictive) -> Result<f64> {
    kl_gaussian_parts(&p.mean, &p.cov, &q.mean, &q.cov)
}

pub fn kl_gaussian_parts(
    mean_p: &DVector<f64>,
    cov_p: &DMatrix<f64>,
    mean_q: &DVector<f64>,
    cov_q: &DMatrix<f64>,
) -> Result<f64> {
    let n = mean_p.len();
    if mean_q.len() != n || cov_p.shape() != (n, n) || cov_q.shape() != (n, n) {
        return Err(Error::Shape("KL arguments have different dimensions".into()));
    }
    // The same absolute jitter goes on both sides so that KL(p || p) = 0.
    let fq = SpdFactor::new(cov_q)?;
    let jitter = fq.jitter();
    let mut cp = cov_p.clone();
    for i in 0..n {
        cp[(i, i)] += jitter;
    }
    let fp = SpdFactor::with_levels(&cp, &[0.0])?;
    let lp = fp.lower();
    let tr = fq.solve_lower(&lp).iter().map(|v| v * v).sum::<f64>();
    let diff = mean_q - mean_p;
    let maha = fq.solve_vec(&diff).dot(&diff);
    let kl = 0.5 * (tr - n as f64 + maha + fq.log_det() - fp.log_det());
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::PriorMean;
    use crate::weights::{build_weight_state, WeightKind, WeightSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_params(b: f64, sigma: f64) -> IcmParams {
        IcmParams::new(
            1.0,
            DMatrix::from_element(1, 1, b.sqrt()),
            DVector::from_element(1, sigma),
            PriorMean::zero(1),
        )
        .unwrap()
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, t: usize) -> (Dataset, IcmParams) {
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(n, t, |_, _| rng.random_range(-2.0..2.0));
        let l = DMatrix::from_fn(t, t, |i, j| if j < i { rng.random_range(-0.5..0.5) } else if i == j { rng.random_range(0.5..1.2) } else { 0.0 });
        let noise = DVector::from_fn(t, |_, _| rng.random_range(0.2..0.6));
        let p = IcmParams::new(rng.random_range(0.5..1.5), l, noise, PriorMean::Constant(vec![0.1; t])).unwrap();
        (Dataset::complete(x, y).unwrap(), p)
    }

    #[test]
    fn jw_and_mw_reduce_to_mogp_quantities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (data, p) = random_problem(&mut rng, 4, 2);
        let w = build_weight_state(&data, &p, &WeightSpec::constant(2)).unwrap();
        let jw = assemble_jw(&w, &p).unwrap();
        assert!(jw.iter().all(|v| (v - 1.0).abs() < 1e-15));
        let mw = assemble_mw(&w, &p, &data).unwrap();
        assert!(mw.iter().all(|v| *v == 0.1));

        let mut halved = w.clone();
        halved.weights /= 2.0;
        let jw2 = assemble_jw(&halved, &p).unwrap();
        assert!(jw2.iter().all(|v| (v - 4.0).abs() < 1e-14));

        let mut zero = w.clone();
        zero.weights[(0, 0)] = 0.0;
        assert!(matches!(assemble_jw(&zero, &p), Err(Error::InvalidState(_))));
    }

    #[test]
    fn jw_matches_elementwise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (data, p) = random_problem(&mut rng, 6, 3);
        let spec = WeightSpec::new(WeightKind::Conditional, vec![0.2; 3]);
        let w = build_weight_state(&data, &p, &spec).unwrap();
        let jw = assemble_jw(&w, &p).unwrap();
        for t in 0..3 {
            for i in 0..6 {
                let expect = p.noise_std[t].powi(2) * w.weights[(i, t)].powi(-2) / 2.0;
                assert!((jw[t * 6 + i] - expect).abs() <= 1e-14 * expect);
            }
        }
    }

    #[test]
    fn mw_single_entry_at_unit_residual() {
        let data = Dataset::complete(DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 1, 1.7)).unwrap();
        let p = scalar_params(1.0, 0.5);
        let mut w = build_weight_state(&data, &p, &WeightSpec::constant(1)).unwrap();
        let c = 0.6;
        w.shrinkage[(0, 0)] = crate::weights::shrinkage_entry(1.7, 1.7 - c, c);
        let mw = assemble_mw(&w, &p, &data).unwrap();
        assert!((mw[0] - (0.0 + 0.25 * (-1.0 / c))).abs() < 1e-14);
    }

    #[test]
    fn mogp_one_by_one_algebra() {
        let (b, s2, y): (f64, f64, f64) = (1.7, 0.3, 0.9);
        let data = Dataset::complete(DMatrix::from_element(1, 1, 0.2), DMatrix::from_element(1, 1, y)).unwrap();
        let p = scalar_params(b, s2.sqrt());
        let pred = mogp_predict(&data, &p, &DMatrix::from_element(1, 1, 0.2), false).unwrap();
        assert!((pred.mean[0] - b * y / (b + s2)).abs() < 1e-7);
        assert!((pred.cov[(0, 0)] - (b - b * b / (b + s2))).abs() < 1e-7);
    }

    #[test]
    fn mogp_huge_noise_recovers_prior() {
        let data = Dataset::complete(DMatrix::from_row_slice(2, 1, &[0.0, 1.0]), DMatrix::from_row_slice(2, 1, &[3.0, -2.0])).unwrap();
        let p = scalar_params(1.0, 1e5);
        let xs = DMatrix::from_element(1, 1, 0.5);
        let pred = mogp_predict(&data, &p, &xs, false).unwrap();
        assert!(pred.mean[0].abs() < 1e-8);
        assert!((pred.cov[(0, 0)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn diagonal_coreg_matches_independent_scalar_gps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 7;
        let x = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-2.0..2.0));
        let y = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
        let data = Dataset::complete(x.clone(), y.clone()).unwrap();
        let l = DMatrix::from_diagonal(&DVector::from_vec(vec![1.1, 0.7]));
        let noise = DVector::from_vec(vec![0.3, 0.5]);
        let p = IcmParams::new(0.9, l.clone(), noise.clone(), PriorMean::zero(2)).unwrap();
        let xs = DMatrix::from_row_slice(2, 1, &[0.1, 1.4]);
        let joint = mogp_predict(&data, &p, &xs, false).unwrap();
        for t in 0..2 {
            let single = Dataset::complete(x.clone(), y.column(t).into_owned().reshape_generic(nalgebra::Dyn(n), nalgebra::Dyn(1))).unwrap();
            let ps = IcmParams::new(0.9, DMatrix::from_element(1, 1, l[(t, t)]), DVector::from_element(1, noise[t]), PriorMean::zero(1)).unwrap();
            let sp = mogp_predict(&single, &ps, &xs, false).unwrap();
            for j in 0..2 {
                assert!((joint.mean_at(j, t) - sp.mean[j]).abs() < 1e-8);
                assert!((joint.var_at(j, t) - sp.cov[(j, j)]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn constant_weights_reproduce_mogp() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (data, p) = random_problem(&mut rng, 9, 3);
        let mut mask = DMatrix::from_element(9, 3, true);
        mask[(0, 1)] = false;
        mask[(4, 2)] = false;
        let data = data.with_mask(mask).unwrap();
        let xs = DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 2.5]);
        let w = build_weight_state(&data, &p, &WeightSpec::constant(3)).unwrap();
        let state = FittedState::new(&data, &p, &w).unwrap();
        let a = morcgp_predict(&state, &xs, true).unwrap();
        let b = mogp_predict(&data, &p, &xs, true).unwrap();
        assert!((a.mean - b.mean).abs().max() < 1e-8);
        assert!((a.cov - b.cov).abs().max() < 1e-8);
    }

    #[test]
    fn scalar_case_matches_rcgp_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (data, p) = random_problem(&mut rng, 8, 1);
        let spec = WeightSpec::new(WeightKind::PriorMean, vec![0.2]);
        let w = build_weight_state(&data, &p, &spec).unwrap();
        let state = FittedState::new(&data, &p, &w).unwrap();
        let xs = DMatrix::from_row_slice(2, 1, &[0.3, -0.8]);
        let pred = morcgp_predict(&state, &xs, false).unwrap();

        // Scalar robust GP written out directly.
        let s2 = p.noise_var(0);
        let b = p.coreg()[(0, 0)];
        let n = 8;
        let kx = crate::kernel::base_gram(data.inputs(), data.inputs(), p.lengthscale) * b;
        let mut a = kx.clone();
        let mut resid = DVector::zeros(n);
        for i in 0..n {
            let wi = w.weights[(i, 0)];
            a[(i, i)] += s2 * s2 / (2.0 * wi * wi);
            resid[i] = data.y(i, 0) - (0.1 + s2 * w.shrinkage[(i, 0)]);
        }
        let ks = crate::kernel::base_gram(data.inputs(), &xs, p.lengthscale) * b;
        let kss = crate::kernel::base_gram(&xs, &xs, p.lengthscale) * b;
        let ainv = a.try_inverse().unwrap();
        let mean = DVector::from_element(2, 0.1) + ks.transpose() * &ainv * resid;
        let cov = kss - ks.transpose() * &ainv * &ks;
        assert!((pred.mean - mean).abs().max() < 1e-8);
        assert!((pred.cov - cov).abs().max() < 1e-8);
    }

    #[test]
    fn product_form_matches_predictive_at_training_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (data, p) = random_problem(&mut rng, 7, 2);
        let spec = WeightSpec::new(WeightKind::Conditional, vec![0.2; 2]);
        let w = build_weight_state(&data, &p, &spec).unwrap();
        let state = FittedState::new(&data, &p, &w).unwrap();
        let pred = state.predict(data.inputs(), false).unwrap();
        let (mean, cov) = state.training_posterior_product_form();
        assert!((pred.mean - mean).abs().max() < 1e-8);
        assert!(crate::linalg::min_eigenvalue(&pred.cov) >= -1e-8 * pred.cov.trace());
        assert!((pred.cov - cov).abs().max() < 1e-8);
    }

    #[test]
    fn small_change_in_inlier_moves_mean_continuously() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (data, p) = random_problem(&mut rng, 10, 2);
        let spec = WeightSpec::new(WeightKind::Conditional, vec![0.2; 2]);
        let xs = DMatrix::from_row_slice(1, 1, &[0.0]);
        let w = build_weight_state(&data, &p, &spec).unwrap();
        let base = FittedState::new(&data, &p, &w).unwrap().predict(&xs, false).unwrap();
        let mut bumped = data.clone();
        bumped.set_y(3, 1, data.y(3, 1) + 1e-6);
        let w2 = build_weight_state(&bumped, &p, &spec).unwrap();
        let moved = FittedState::new(&bumped, &p, &w2).unwrap().predict(&xs, false).unwrap();
        assert!((base.mean - moved.mean).abs().max() <= 1e-3);
    }

    #[test]
    fn kl_values() {
        let p = Predictive {
            mean: DVector::from_vec(vec![0.2, -0.1]),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]),
            includes_noise: false,
            n_points: 2,
            n_channels: 1,
        };
        assert!(kl_gaussian(&p, &p).unwrap().abs() < 1e-12);

        let mut q = p.clone();
        q.mean = DVector::from_vec(vec![1.0, 0.5]);
        let d = &q.mean - &p.mean;
        let expect = 0.5 * d.dot(&(p.cov.clone().try_inverse().unwrap() * &d));
        assert!((kl_gaussian(&p, &q).unwrap() - expect).abs() < 1e-6);

        let one = |s: f64| Predictive {
            mean: DVector::zeros(1),
            cov: DMatrix::from_element(1, 1, s * s),
            includes_noise: false,
            n_points: 1,
            n_channels: 1,
        };
        let kl = kl_gaussian(&one(1.0), &one(2.0)).unwrap();
        assert!((kl - 0.5 * (0.25 - 1.0 + 4f64.ln())).abs() < 1e-6);
        assert!((kl - 0.3181).abs() < 1e-4);
    }

    #[test]
    fn kl_rejects_indefinite_reference() {
        let p = DMatrix::identity(2, 2);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let m = DVector::zeros(2);
        assert!(kl_gaussian_parts(&m, &p, &m, &q).is_err());
    }
}
