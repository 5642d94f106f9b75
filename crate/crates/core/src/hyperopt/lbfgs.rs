//! Limited-memory BFGS with central finite-difference gradients and optional
//! box bounds (handled by projection).

use std::collections::VecDeque;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct LbfgsConfig {
    pub max_iter: usize,
    /// Stop when an accepted decrease is below this and the projected
    /// gradient is within `100 g_tol`.
    pub f_tol: f64,
    /// Stop when the projected gradient's infinity norm is below this.
    pub g_tol: f64,
    pub memory: usize,
    pub fd_step: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { max_iter: 500, f_tol: 1e-8, g_tol: 1e-6, memory: 10, fd_step: 1e-5 }
    }
}

const STALL_GRADIENT_FACTOR: f64 = 100.0;

pub type Bounds = Vec<(f64, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsResult {
    pub x: DVector<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub gradient_evaluations: usize,
    pub converged: bool,
    /// Objective after every accepted iterate (starting with the initial point).
    pub trace: Vec<f64>,
}

fn project(x: &mut DVector<f64>, bounds: Option<&Bounds>) {
    if let Some(b) = bounds {
        for (v, (lo, hi)) in x.iter_mut().zip(b) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn fd_gradient<F: FnMut(&DVector<f64>) -> f64>(f: &mut F, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Zeroes gradient components that push against an active bound.
fn projected_gradient(g: &DVector<f64>, x: &DVector<f64>, bounds: Option<&Bounds>) -> DVector<f64> {
    let mut pg = g.clone();
    if let Some(b) = bounds {
        for i in 0..x.len() {
            let (lo, hi) = b[i];
            if (x[i] <= lo && g[i] > 0.0) || (x[i] >= hi && g[i] < 0.0) {
                pg[i] = 0.0;
            }
        }
    }
    pg
}

/// Minimizes `f` from `x0` using the gradient callback `grad`. Non-finite
/// values are treated as `+inf` by the line search; accepted iterates never
/// increase `f`.
pub fn minimize<F, G>(
    mut f: F,
    mut grad: G,
    x0: &DVector<f64>,
    bounds: Option<&Bounds>,
    config: &LbfgsConfig,
) -> LbfgsResult
where
    F: FnMut(&DVector<f64>) -> f64,
    G: FnMut(&DVector<f64>) -> DVector<f64>,
{
    let mut evals = 0usize;
    let mut grad_evals = 0usize;
    let mut eval = |x: &DVector<f64>, evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    // A non-finite component carries no usable direction; drop it.
    let mut gradient = |x: &DVector<f64>, grad_evals: &mut usize| {
        *grad_evals += 1;
        grad(x).map(|v| if v.is_finite() { v } else { 0.0 })
    };
    let mut x = x0.clone();
    project(&mut x, bounds);
    let mut fx = eval(&x, &mut evals);
    let mut trace = vec![fx];
    if !fx.is_finite() {
        return LbfgsResult {
            x,
            f: fx,
            iterations: 0,
            evaluations: evals,
            gradient_evaluations: grad_evals,
            converged: false,
            trace,
        };
    }
    let mut g = gradient(&x, &mut grad_evals);
    let mut hist: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..config.max_iter {
        let pg = projected_gradient(&g, &x, bounds);
        if pg.amax() < config.g_tol {
            converged = true;
            break;
        }
        iterations += 1;

        // Two-loop recursion on the projected gradient.
        let mut q = pg.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * s.dot(&q);
            q -= y * a;
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            q *= s.dot(y) / y.dot(y);
        } else {
            q /= pg.norm().max(1.0);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
            let b = rho * y.dot(&q);
            q += s * (a - b);
        }
        let mut dir = -q;
        if dir.dot(&pg) >= 0.0 {
            hist.clear();
            dir = -pg.clone() / pg.norm().max(1.0);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial = &x + &dir * step;
            project(&mut trial, bounds);
            let ft = eval(&trial, &mut evals);
            let decrease = g.dot(&(&trial - &x));
            if ft <= fx + 1e-4 * decrease.min(0.0) && ft <= fx {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            converged = true;
            break;
        };
        let g_new = gradient(&x_new, &mut grad_evals);
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if hist.len() == config.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let df = fx - f_new;
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(fx);
        // A short step far from stationarity usually reflects poor curvature
        // information rather than convergence.
        if df < config.f_tol && projected_gradient(&g, &x, bounds).amax() <= STALL_GRADIENT_FACTOR * config.g_tol {
            converged = true;
            break;
        }
    }
    LbfgsResult { x, f: fx, iterations, evaluations: evals, gradient_evaluations: grad_evals, converged, trace }
}

/// [`minimize`] with central finite-difference gradients.
pub fn minimize_fd<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    x0: &DVector<f64>,
    bounds: Option<&Bounds>,
    config: &LbfgsConfig,
) -> LbfgsResult {
    let h = config.fd_step;
    minimize(&f, |x: &DVector<f64>| fd_gradient(&mut |p: &DVector<f64>| f(p), x, h), x0, bounds, config)
}
