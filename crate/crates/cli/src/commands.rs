//! Subcommand implementations. Each writes its outputs to files and returns
//! a short human-readable report.

use std::path::{Path, PathBuf};

use morcgp::experiments::{
    pif_curve, predictive_grid, run_benchmark, BenchmarkConfig, BenchmarkResults, Method, PifModel, Scenario,
};
use morcgp::hyperopt::{fit, FitMethod};
use morcgp::inference::{mogp_predict, FittedState, Predictive};
use morcgp::weights::build_weight_state;
use morcgp::{Dataset, IcmParams, PriorMean, WeightKind, WeightSpec};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::csv_io::{column_names, fmt_f64, load_csv, load_inputs, rows_with_inputs, save_csv, save_table};
use crate::error::{CliError, CliResult};
use crate::params_io::ParamsFile;
use crate::config::FitSettings;

fn weight_spec(method: Method, t: usize, epsilon: f64) -> WeightSpec {
    match method {
        Method::Mogp => WeightSpec::constant(t),
        Method::Morcgp => WeightSpec::new(WeightKind::Conditional, vec![epsilon; t]),
        Method::MorcgpNaive => WeightSpec::new(WeightKind::PriorMean, vec![epsilon; t]),
    }
}

pub fn fit_command(data_path: &Path, settings: &FitSettings, out: &Path) -> CliResult<String> {
    let data = load_csv(data_path)?;
    let t = data.t();
    let spec = weight_spec(settings.method, t, settings.epsilon);
    let method = if settings.method == Method::Mogp { FitMethod::MogpMl } else { FitMethod::MorcgpWloo };
    let mut config = settings.fit.clone();
    config.prior_mean = Some(settings.prior_mean.resolve(t));
    let result = fit(&data, None, &spec, method, &config)?;
    ParamsFile::from_fit(settings.method, &data, &result)?.save(out)?;
    Ok(format!(
        "fitted {} on {} rows: lengthscale {:.6}, objective {:.6}, {} iterations; wrote {}",
        settings.method.label(),
        data.n(),
        result.params.lengthscale,
        result.diagnostics.objective,
        result.diagnostics.iterations,
        out.display()
    ))
}

/// Predictive of the model stored in `file`, conditioned on `data`. Robust
/// weights are rebuilt from the stored weight settings; nothing is refitted.
pub fn predict_from_file(file: &ParamsFile, data: &Dataset, x: &DMatrix<f64>, include_noise: bool) -> CliResult<Predictive> {
    let params = file.params()?;
    if params.t() != data.t() {
        return Err(CliError::Usage(format!("parameters have {} channels, data has {}", params.t(), data.t())));
    }
    match (&file.weights, file.method) {
        (None, Method::Mogp) => Ok(mogp_predict(data, &params, x, include_noise)?),
        (Some(record), _) => {
            let w = build_weight_state(data, &params, &record.spec()?)?;
            Ok(FittedState::new(data, &params, &w)?.predict(x, include_noise)?)
        }
        (None, m) => Err(CliError::Usage(format!("parameters for method {} carry no weight settings", m.label()))),
    }
}

pub fn predict_command(params_path: &Path, data_path: &Path, query: &Path, include_noise: bool, out: &Path) -> CliResult<String> {
    let file = ParamsFile::load(params_path)?;
    let data = load_csv(data_path)?;
    let x = load_inputs(query)?;
    if x.ncols() != data.d() {
        return Err(CliError::Usage(format!("query has {} input columns, data has {}", x.ncols(), data.d())));
    }
    let pred = predict_from_file(&file, &data, &x, include_noise)?;
    let (mean, var) = predictive_grid(&pred);
    if mean.iter().chain(var.iter()).any(|v| !v.is_finite()) {
        return Err(morcgp::Error::Singular("non-finite prediction".into()).into());
    }
    let mut header = column_names("x", x.ncols());
    header.extend(column_names("mean", data.t()));
    header.extend(column_names("var", data.t()));
    save_table(out, &header, &rows_with_inputs(&x, &[&mean, &var]))?;
    Ok(format!("predicted {} points; wrote {}", x.nrows(), out.display()))
}

#[derive(Serialize)]
struct BenchmarkReport<'a> {
    config: &'a BenchmarkConfig,
    records: &'a [morcgp::experiments::RunRecord],
    summary: &'a [morcgp::experiments::SummaryRow],
}

pub fn benchmark_csv_rows(results: &BenchmarkResults) -> Vec<Vec<String>> {
    results
        .records
        .iter()
        .map(|r| {
            vec![
                r.scenario.clone(),
                r.method.clone(),
                r.seed.to_string(),
                fmt_f64(r.rmse),
                fmt_f64(r.nlpd),
                fmt_f64(r.fit_seconds),
                r.n_failures.to_string(),
            ]
        })
        .collect()
}

pub fn benchmark_command(config: &BenchmarkConfig, out_csv: &Path, out_json: Option<&Path>) -> CliResult<String> {
    let results = run_benchmark(config)?;
    let header: Vec<String> =
        ["scenario", "method", "seed", "rmse", "nlpd", "fit_seconds", "n_failures"].iter().map(|s| s.to_string()).collect();
    save_table(out_csv, &header, &benchmark_csv_rows(&results))?;
    if let Some(path) = out_json {
        let report = BenchmarkReport { config, records: &results.records, summary: &results.summary };
        let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    }
    let mut lines = vec![format!("{:<20} {:<14} {:>16} {:>16} {:>8}", "scenario", "method", "rmse", "nlpd", "failed")];
    for s in &results.summary {
        lines.push(format!(
            "{:<20} {:<14} {:>7.4} ± {:<6.4} {:>7.4} ± {:<6.4} {:>8}",
            s.scenario, s.method, s.rmse_mean, s.rmse_std, s.nlpd_mean, s.nlpd_std, s.n_failures
        ));
    }
    Ok(lines.join("\n"))
}

pub struct PifRequest {
    pub data: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub model: Method,
    pub row: Option<usize>,
    pub channel: usize,
    pub magnitudes: Vec<f64>,
    pub seed: u64,
    pub epsilon: f64,
}

pub fn pif_command(req: &PifRequest, out: &Path) -> CliResult<String> {
    let (data, params, stored_spec) = match (&req.data, &req.params) {
        (Some(d), Some(p)) => {
            let file = ParamsFile::load(p)?;
            let spec = file.weights.as_ref().map(|w| w.spec()).transpose()?;
            (load_csv(d)?, file.params()?, spec)
        }
        (None, None) => {
            let scenario = crate::config::preset_scenario("clean")?;
            let problem = scenario.generate(req.seed, 0)?;
            let params = scenario.generator.true_params(PriorMean::zero(scenario.generator.t()))?;
            (problem.train, params, None)
        }
        _ => return Err(CliError::Usage("--data and --params must be given together".into())),
    };
    let row = req.row.unwrap_or(data.n() / 2);
    let model = match req.model {
        Method::Mogp => PifModel::Mogp,
        m => PifModel::Morcgp(match stored_spec {
            Some(s) if s.kind != WeightKind::Constant => s,
            _ => default_pif_spec(m, &params, req.epsilon),
        }),
    };
    let curve = pif_curve(&data, &params, &model, row, req.channel, &req.magnitudes)?;
    let mut header = vec!["magnitude".to_string()];
    header.extend(column_names("kl", data.t()));
    let rows: Vec<Vec<String>> = curve
        .magnitudes
        .iter()
        .enumerate()
        .map(|(r, m)| std::iter::once(fmt_f64(*m)).chain(curve.kl_per_channel.row(r).iter().map(|v| fmt_f64(*v))).collect())
        .collect();
    save_table(out, &header, &rows)?;
    Ok(format!("influence of entry (row {row}, channel {}) at {} magnitudes; wrote {}", req.channel, rows.len(), out.display()))
}

fn default_pif_spec(method: Method, params: &IcmParams, epsilon: f64) -> WeightSpec {
    let spec = weight_spec(method, params.t(), epsilon);
    if spec.kind == WeightKind::Conditional {
        spec.with_center_cov(params.output_cov())
    } else {
        spec
    }
}

pub fn simulate_command(scenario: &Scenario, seed: u64, out: &Path, truth: &Path, outliers: &Path) -> CliResult<String> {
    let problem = scenario.generate(seed, 0)?;
    save_csv(out, &problem.train)?;
    let t = problem.latent.ncols();
    let mut header = column_names("x", problem.train.d());
    header.extend(column_names("f", t));
    save_table(truth, &header, &rows_with_inputs(problem.train.inputs(), &[&problem.latent]))?;
    let rows: Vec<Vec<String>> = problem.outliers.iter().map(|(i, c)| vec![i.to_string(), c.to_string()]).collect();
    save_table(outliers, &["row".to_string(), "channel".to_string()], &rows)?;
    Ok(format!(
        "simulated scenario {} (seed {seed}): {} rows, {} outliers; wrote {}, {}, {}",
        scenario.name,
        problem.train.n(),
        problem.outliers.len(),
        out.display(),
        truth.display(),
        outliers.display()
    ))
}
