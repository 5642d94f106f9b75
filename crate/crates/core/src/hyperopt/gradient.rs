//! Analytic gradients of the marginal likelihood and of the weighted LOO
//! objective with respect to the encoded parameter vector.
//!
//! Every kernel derivative has the form `E (x) G` with `E` a `T x T` matrix and
//! `G` either the base Gram matrix or its log-lengthscale derivative, which
//! keeps the cost of a full gradient close to one matrix inversion.

use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, FlatIndex};
use crate::error::Result;
use crate::inference::FittedState;
use crate::kernel::{base_gram, block_gram, restrict_observed, IcmParams};
use crate::linalg::{select_rows_cols, SpdFactor};

use super::encoding::ParamVector;
use super::{LooEntry, LN_2PI, LOO_VAR_FLOOR};

/// How the noise-dependent parts of the robust objective move with `ln sigma_t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseScaling {
    /// `d nd / d ln sigma_t = nd_power * nd` for the `Sigma J_W` diagonal.
    pub nd_power: f64,
    /// `d c / d ln sigma_t = coef_power * c` for the objective coefficients.
    pub coef_power: f64,
}

/// Base Gram matrix and its derivative with respect to `ln l`.
fn gram_pair(x: &DMatrix<f64>, lengthscale: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let g = base_gram(x, x, lengthscale);
    let n = x.nrows();
    let l2 = lengthscale * lengthscale;
    let dg = DMatrix::from_fn(n, n, |i, j| {
        let r2 = (x.row(i) - x.row(j)).norm_squared();
        2.0 * r2 / l2 * g[(i, j)]
    });
    (g, dg)
}

/// `dB / d theta` for every entry of the encoded `L`, in encoding order.
fn coreg_derivatives(params: &IcmParams) -> Vec<DMatrix<f64>> {
    let t = params.t();
    let l = &params.chol_coreg;
    let mut out = Vec::with_capacity(t * (t + 1) / 2);
    for a in 0..t {
        for b in 0..=a {
            // d(L L^T) for a unit change of L_ab: e_a L_b^T + L_b e_a^T.
            let mut e = DMatrix::zeros(t, t);
            for j in 0..t {
                e[(a, j)] += l[(j, b)];
                e[(j, a)] += l[(j, b)];
            }
            out.push(e);
        }
    }
    out
}

/// `S[t', t''] = sum_{r in t', s in t''} W_rs G[i_r, i_s]`.
fn contract(w: &DMatrix<f64>, g: &DMatrix<f64>, obs: &[(usize, usize)], t: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(t, t);
    for (c, &(is, cs)) in obs.iter().enumerate() {
        let col = w.column(c);
        for (r, &(ir, cr)) in obs.iter().enumerate() {
            s[(cr, cs)] += col[r] * g[(ir, is)];
        }
    }
    s
}

fn entries_of(observed: &[usize], n: usize) -> Vec<(usize, usize)> {
    observed
        .iter()
        .map(|&k| {
            let f = FlatIndex::from_flat(k, n);
            (f.obs, f.channel)
        })
        .collect()
}

/// Negative log marginal likelihood and its gradient in the encoded coordinates.
pub fn marginal_nll_with_gradient(data: &Dataset, params: &IcmParams) -> Result<(f64, DVector<f64>)> {
    let t = params.t();
    let n = data.n();
    let observed = restrict_observed(data.mask())?;
    let obs = entries_of(&observed, n);
    let means = params.prior_mean.resolve(data)?;
    let mut a = select_rows_cols(&block_gram(data.inputs(), params), &observed);
    for (r, &(_, c)) in obs.iter().enumerate() {
        a[(r, r)] += params.noise_var(c);
    }
    let resid = DVector::from_iterator(obs.len(), obs.iter().map(|&(i, c)| data.y(i, c) - means[c]));
    let factor = SpdFactor::new(&a)?;
    let alpha = factor.solve_vec(&resid);
    let value = 0.5 * (resid.dot(&alpha) + factor.log_det() + obs.len() as f64 * LN_2PI);

    let mut w = factor.inverse();
    w -= &alpha * alpha.transpose();
    let (g, dg) = gram_pair(data.inputs(), params.lengthscale);
    let s_g = contract(&w, &g, &obs, t);
    let s_dg = contract(&w, &dg, &obs, t);
    let b = params.coreg();

    let mut grad = DVector::zeros(ParamVector::len_for(t));
    grad[ParamVector::lengthscale_index()] = 0.5 * b.component_mul(&s_dg).sum();
    for (r, &(_, c)) in obs.iter().enumerate() {
        grad[ParamVector::noise_index(c)] += w[(r, r)] * params.noise_var(c);
    }
    for (p, e) in coreg_derivatives(params).iter().enumerate() {
        grad[ParamVector::coreg_offset(t) + p] = 0.5 * e.component_mul(&s_g).sum();
    }
    Ok((value, grad))
}

/// Per-entry `Q_r[t', t''] = sum_{u in t''} [A^-1 (I (x) G)]_{r, (t', i_u)} A^-1_{ur}`,
/// so that `[A^-1 (E (x) G) A^-1]_rr = sum E o Q_r`. Row `r` holds `Q_r` flattened
/// as `t' * T + t''`.
fn diag_sandwich(ainv: &DMatrix<f64>, g: &DMatrix<f64>, obs: &[(usize, usize)], t: usize) -> DMatrix<f64> {
    let m = obs.len();
    let npts = g.nrows();
    // M[r, t' * N + j] = sum_{s in t'} A^-1_{rs} G[i_s, j]
    let mut mm = DMatrix::zeros(m, t * npts);
    for tp in 0..t {
        let cols: Vec<usize> = (0..m).filter(|&s| obs[s].1 == tp).collect();
        if cols.is_empty() {
            continue;
        }
        let a_sub = DMatrix::from_fn(m, cols.len(), |r, c| ainv[(r, cols[c])]);
        let g_sub = DMatrix::from_fn(cols.len(), npts, |c, j| g[(obs[cols[c]].0, j)]);
        mm.columns_mut(tp * npts, npts).copy_from(&(a_sub * g_sub));
    }
    let mut q = DMatrix::zeros(m, t * t);
    for r in 0..m {
        let arow = ainv.column(r);
        for (u, &(iu, cu)) in obs.iter().enumerate() {
            let a = arow[u];
            for tp in 0..t {
                q[(r, tp * t + cu)] += mm[(r, tp * npts + iu)] * a;
            }
        }
    }
    q
}

fn contract_row(q: &DMatrix<f64>, r: usize, e: &DMatrix<f64>) -> f64 {
    let t = e.nrows();
    let mut acc = 0.0;
    for tp in 0..t {
        for tpp in 0..t {
            acc += e[(tp, tpp)] * q[(r, tp * t + tpp)];
        }
    }
    acc
}

/// Weighted LOO objective (to be maximized) and its gradient in the encoded
/// coordinates. `coef[r]` is the objective coefficient `(w / beta)^2` of
/// observed entry `r`; flagged entries contribute nothing.
pub fn wloo_with_gradient(
    state: &FittedState,
    entries: &[LooEntry],
    coef: &DVector<f64>,
    scaling: NoiseScaling,
) -> (f64, DVector<f64>) {
    let params = state.params();
    let data = state.data();
    let t = params.t();
    let obs = entries_of(state.observed(), data.n());
    let m = obs.len();
    let ainv = state.factor().inverse();
    let adiag = ainv.diagonal();
    let alpha = state.alpha();
    let nd = state.noise_diag();
    let (g, dg) = gram_pair(data.inputs(), params.lengthscale);
    let b = params.coreg();
    let e_list = coreg_derivatives(params);

    let value: f64 = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| !e.flagged)
        .map(|(r, e)| coef[r] * e.log_density)
        .sum();

    // Per-entry sensitivities of log p to (mu, latent variance, total variance).
    let live: Vec<bool> = entries.iter().map(|e| !e.flagged).collect();
    let floored: Vec<bool> = (0..m)
        .map(|r| 1.0 / adiag[r] - nd[r] - state.factor().jitter() < LOO_VAR_FLOOR)
        .collect();
    let d_mu: Vec<f64> = entries.iter().map(|e| (data.y(e.i, e.t) - e.mean) / e.var).collect();
    let d_var: Vec<f64> = entries
        .iter()
        .map(|e| {
            let res = data.y(e.i, e.t) - e.mean;
            -0.5 / e.var + 0.5 * res * res / (e.var * e.var)
        })
        .collect();

    // Objective change given d alpha, d diag(A^-1), d z, d nd, d sigma^2 and d coef.
    let combine = |dz: &DVector<f64>, dalpha: &DVector<f64>, dadiag: &DVector<f64>, dnd: &DVector<f64>, dsig: &DVector<f64>, dcoef: &DVector<f64>| {
        let mut acc = 0.0;
        for r in 0..m {
            if !live[r] {
                continue;
            }
            let ak = adiag[r];
            let dmu = dz[r] - dalpha[r] / ak + alpha[r] * dadiag[r] / (ak * ak);
            let dlatent = if floored[r] { 0.0 } else { -dadiag[r] / (ak * ak) - dnd[r] };
            let dv = dlatent + dsig[r];
            let dlogp = d_mu[r] * dmu + d_var[r] * dv;
            acc += coef[r] * dlogp + dcoef[r] * entries[r].log_density;
        }
        acc
    };
    let zeros = DVector::zeros(m);
    let mut grad = DVector::zeros(ParamVector::len_for(t));

    // alpha laid out as N x T for the Kronecker products.
    let mut alpha_mat = DMatrix::zeros(data.n(), t);
    for (r, &(i, c)) in obs.iter().enumerate() {
        alpha_mat[(i, c)] = alpha[r];
    }
    let kron_term = |gm: &DMatrix<f64>, q: &DMatrix<f64>, e: &DMatrix<f64>| {
        let pe = (gm * &alpha_mat) * e.transpose();
        let da_alpha = DVector::from_fn(m, |r, _| pe[(obs[r].0, obs[r].1)]);
        let dalpha = -(&ainv * da_alpha);
        let dadiag = DVector::from_fn(m, |r, _| -contract_row(q, r, e));
        combine(&zeros, &dalpha, &dadiag, &zeros, &zeros, &zeros)
    };
    let q_dg = diag_sandwich(&ainv, &dg, &obs, t);
    grad[ParamVector::lengthscale_index()] = kron_term(&dg, &q_dg, &b);
    let q_g = diag_sandwich(&ainv, &g, &obs, t);
    for (p, e) in e_list.iter().enumerate() {
        grad[ParamVector::coreg_offset(t) + p] = kron_term(&g, &q_g, e);
    }

    let shrink = DVector::from_fn(m, |r, _| state.weights().shrinkage[(obs[r].0, obs[r].1)]);
    for c in 0..t {
        let s2 = params.noise_var(c);
        let in_c = |r: usize| obs[r].1 == c;
        let dnd = DVector::from_fn(m, |r, _| if in_c(r) { scaling.nd_power * nd[r] } else { 0.0 });
        let dz = DVector::from_fn(m, |r, _| if in_c(r) { -2.0 * s2 * shrink[r] } else { 0.0 });
        let dsig = DVector::from_fn(m, |r, _| if in_c(r) { 2.0 * s2 } else { 0.0 });
        let dcoef = DVector::from_fn(m, |r, _| if in_c(r) { scaling.coef_power * coef[r] } else { 0.0 });
        let rhs = &dz - dnd.component_mul(alpha);
        let dalpha = &ainv * rhs;
        let dadiag = DVector::from_fn(m, |r, _| {
            -(0..m).filter(|&s| in_c(s)).map(|s| ainv[(r, s)] * ainv[(r, s)] * dnd[s]).sum::<f64>()
        });
        grad[ParamVector::noise_index(c)] = combine(&dz, &dalpha, &dadiag, &dnd, &dsig, &dcoef);
    }
    (value, grad)
}
