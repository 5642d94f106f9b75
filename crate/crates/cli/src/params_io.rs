//! Fitted-parameter files: JSON with full-precision floats, `B` stored both
//! as a matrix and as its Cholesky factor.

use std::path::Path;

use morcgp::experiments::Method;
use morcgp::hyperopt::{FitDiagnostics, FitResult};
use morcgp::{Dataset, IcmParams, PriorMean, WeightKind, WeightSpec, WeightState};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Masked (NaN) entries become `null`.
fn optional_rows(m: &DMatrix<f64>) -> Vec<Vec<Option<f64>>> {
    (0..m.nrows()).map(|i| m.row(i).iter().map(|v| (!v.is_nan()).then_some(*v)).collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> CliResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(CliError::Usage(format!("{what} must be a non-empty rectangular array")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Weight function settings plus the weights evaluated on the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct WeightsRecord {
    pub kind: WeightKind,
    pub epsilon: Vec<f64>,
    pub beta: Option<Vec<f64>>,
    pub center_cov: Option<Vec<Vec<f64>>>,
    /// `N x T`, `null` where unobserved.
    pub values: Vec<Vec<Option<f64>>>,
    pub centers: Vec<Vec<Option<f64>>>,
    pub shrinkage: Vec<Vec<Option<f64>>>,
    pub scales: Vec<f64>,
    pub beta_used: Vec<f64>,
}

impl WeightsRecord {
    pub fn new(spec: &WeightSpec, state: &WeightState) -> Self {
        Self {
            kind: spec.kind,
            epsilon: spec.epsilon.clone(),
            beta: spec.beta.clone(),
            center_cov: spec.center_cov.as_ref().map(matrix_rows),
            values: optional_rows(&state.weights),
            centers: optional_rows(&state.centers),
            shrinkage: optional_rows(&state.shrinkage),
            scales: state.scales.iter().copied().collect(),
            beta_used: state.beta.iter().copied().collect(),
        }
    }

    pub fn spec(&self) -> CliResult<WeightSpec> {
        Ok(WeightSpec {
            kind: self.kind,
            epsilon: self.epsilon.clone(),
            beta: self.beta.clone(),
            center_cov: self.center_cov.as_deref().map(|r| matrix_from_rows(r, "center-cov")).transpose()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ParamsFile {
    pub method: Method,
    pub lengthscale: f64,
    pub coreg: Vec<Vec<f64>>,
    /// Lower-triangular `L` with `B = L L^T`; this is what gets loaded.
    pub chol_coreg: Vec<Vec<f64>>,
    pub noise_std: Vec<f64>,
    pub prior_mean: PriorMean,
    /// Prior mean values resolved on the training data.
    pub prior_mean_values: Vec<f64>,
    /// Absent for the standard MOGP.
    pub weights: Option<WeightsRecord>,
    /// Optimizer report; informational only.
    #[serde(default)]
    pub diagnostics: Option<serde_json::Value>,
}

impl ParamsFile {
    pub fn new(method: Method, data: &Dataset, params: &IcmParams, weights: Option<(&WeightSpec, &WeightState)>, diagnostics: Option<&FitDiagnostics>) -> CliResult<Self> {
        Ok(Self {
            method,
            lengthscale: params.lengthscale,
            coreg: matrix_rows(&params.coreg()),
            chol_coreg: matrix_rows(&params.chol_coreg),
            noise_std: params.noise_std.iter().copied().collect(),
            prior_mean: params.prior_mean.clone(),
            prior_mean_values: params.prior_mean.resolve(data)?.iter().copied().collect(),
            weights: weights.map(|(s, w)| WeightsRecord::new(s, w)),
            diagnostics: diagnostics.map(|d| serde_json::to_value(d).expect("diagnostics serialize")),
        })
    }

    pub fn from_fit(method: Method, data: &Dataset, result: &FitResult) -> CliResult<Self> {
        let weights = (method != Method::Mogp).then_some((&result.spec, &result.weights));
        Self::new(method, data, &result.params, weights, Some(&result.diagnostics))
    }

    pub fn params(&self) -> CliResult<IcmParams> {
        let l = matrix_from_rows(&self.chol_coreg, "chol-coreg")?;
        let p = IcmParams::new(self.lengthscale, l, DVector::from_column_slice(&self.noise_std), self.prior_mean.clone())?;
        let b = matrix_from_rows(&self.coreg, "coreg")?;
        if b.shape() != (p.t(), p.t()) || (&b - p.coreg()).amax() > 1e-9 * (1.0 + b.amax()) {
            return Err(CliError::Usage("coreg disagrees with chol-coreg".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).expect("params serialize");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Parse {
            path: path.display().to_string(),
            line: e.line() as u64,
            message: e.to_string(),
        })
    }
}
