//! TOML settings files. Every table rejects unknown keys.

use std::path::Path;

use morcgp::experiments::{presets, BenchmarkConfig, Method, ModelPrior, Scenario};
use morcgp::hyperopt::FitConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub fn parse_toml<T: DeserializeOwned>(text: &str, path: &str) -> CliResult<T> {
    toml::from_str(text).map_err(|e| CliError::Config { path: path.to_string(), message: e.to_string() })
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_toml(&text, &path.display().to_string())
}

/// Settings for `fit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct FitSettings {
    pub method: Method,
    /// Expected outlier fraction per channel.
    pub epsilon: f64,
    pub prior_mean: ModelPrior,
    pub fit: FitConfig,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self { method: Method::Morcgp, epsilon: 0.1, prior_mean: ModelPrior::Zero, fit: FitConfig::default() }
    }
}

/// Built-in scenarios, by name.
pub fn preset_scenario(name: &str) -> CliResult<Scenario> {
    let table = presets::synthetic_benchmark(vec![0]);
    let found = match name {
        "clean" | "contaminated" => table.scenarios.into_iter().find(|s| s.name == name),
        "focused-interval" => Some(presets::focused_interval_scenario()),
        _ => name
            .strip_prefix("mahalanobis-s")
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|s| (1..=10).contains(s))
            .map(presets::multivariate_outlier_scenario),
    };
    found.ok_or_else(|| {
        CliError::Usage(format!(
            "unknown scenario preset `{name}`; expected clean, contaminated, focused-interval or mahalanobis-s1..mahalanobis-s10"
        ))
    })
}

/// Built-in benchmark configurations, by name.
pub fn preset_benchmark(name: &str) -> CliResult<BenchmarkConfig> {
    match name {
        "table1" => Ok(presets::synthetic_benchmark((0..20).collect())),
        "multivariate" => {
            Ok(presets::known_parameter_benchmark((1..=8).map(presets::multivariate_outlier_scenario).collect(), (0..10).collect()))
        }
        _ => Err(CliError::Usage(format!("unknown benchmark preset `{name}`; expected table1 or multivariate"))),
    }
}

/// Parses `a..b` (half open) or a comma-separated list.
pub fn parse_seeds(text: &str) -> CliResult<Vec<u64>> {
    let bad = || CliError::Usage(format!("invalid seed list `{text}`; use `0..20` or `1,2,3`"));
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b <= a {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}
