//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use morcgp::experiments::{BenchmarkConfig, Method, ModelPrior, Scenario};

use crate::commands;
use crate::config::{load_toml, parse_seeds, preset_benchmark, preset_scenario, FitSettings};
use crate::error::{CliError, CliResult};

const CONFIG_HELP: &str = "\
Settings files are TOML; unknown keys are rejected. Command-line flags override file values.

fit settings (all optional):
  method = \"morcgp\"            # mogp | morcgp | morcgp-naive
  epsilon = 0.1                # expected outlier fraction per channel
  prior-mean = \"zero\"          # zero | empirical
  [fit]
  freeze = \"standardized\"      # standardized | absolute | absolute-fixed-beta
  noise-var-cap = <none>       # upper bound on noise variances
  min-noise-std = 1e-4
  lengthscale-range = <none>   # [low, high]
  max-restarts = 3
  seed = 0                     # seeds the robust-scatter subsets and restarts
  finite-differences = false
  weighted-objective = true
  [fit.optimizer]
  max-iter = 500, f-tol = 1e-8, g-tol = 1e-6, memory = 10, fd-step = 1e-5
  [fit.mcd]
  h = <ceil(0.75 M) for M complete rows>, n-starts = 50, n-refine = 10, max-iter = 100, tol = 1e-9

benchmark settings: scenarios (list of tables: name, generator, contamination),
  methods, seeds, epsilon = 0.1, prior-mean = \"zero\", optimize = true,
  eval = { kind = \"latent\" } | { kind = \"held-out\", n-test = N },
  rmse-mode = \"standard\" | \"paper-literal\", timings = false, [fit] as above.

simulate settings: one scenario table (name, generator, contamination).

Channels are numbered from 0 on the command line and in settings files
(CSV column y_1 is channel 0).

Exit status: 0 success, 1 usage or input error, 2 numerical failure.";

#[derive(Parser, Debug)]
#[command(name = "morcgp", version, about = "Outlier-robust multi-output Gaussian process regression", after_long_help = CONFIG_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit hyperparameters and write them as JSON.
    Fit(FitArgs),
    /// Predict at query inputs from a parameters file, without refitting.
    Predict(PredictArgs),
    /// Run a seeded benchmark sweep and write per-run CSV and a JSON report.
    Benchmark(BenchmarkArgs),
    /// Posterior influence of one contaminated entry over a range of magnitudes.
    Pif(PifArgs),
    /// Draw a synthetic (possibly contaminated) dataset.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Training data CSV (x_1..x_d, y_1..y_T; empty y cells are unobserved).
    #[arg(long)]
    pub data: PathBuf,
    /// Output parameters JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// TOML settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model [default: morcgp].
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Expected outlier fraction per channel [default: 0.1].
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Prior mean: zero or empirical [default: zero].
    #[arg(long, value_parser = parse_prior)]
    pub prior_mean: Option<ModelPrior>,
    /// Seed for the robust scatter and restarts [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Parameters JSON written by `fit`.
    #[arg(long)]
    pub params: PathBuf,
    /// Training data CSV the model conditions on.
    #[arg(long)]
    pub data: PathBuf,
    /// Query CSV with columns x_1..x_d (further columns are ignored).
    #[arg(long)]
    pub query: PathBuf,
    /// Output CSV: inputs, mean_1..mean_T, var_1..var_T.
    #[arg(long)]
    pub out: PathBuf,
    /// Include observation noise in the variances.
    #[arg(long)]
    pub noise: bool,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    /// TOML benchmark settings.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in benchmark: table1 or multivariate [default: table1].
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the seeds: `a..b` (half open) or `1,2,3`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Record wall-clock fit times (makes the output time dependent).
    #[arg(long)]
    pub timings: bool,
    /// Per-run CSV (scenario, method, seed, rmse, nlpd, fit_seconds, n_failures).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON report with the configuration echo, records and summary.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PifArgs {
    /// Data CSV; without it (and --params) the clean synthetic problem is drawn from --seed.
    #[arg(long, requires = "params")]
    pub data: Option<PathBuf>,
    /// Parameters JSON.
    #[arg(long, requires = "data")]
    pub params: Option<PathBuf>,
    /// Posterior to probe: mogp, morcgp or morcgp-naive.
    #[arg(long, value_parser = parse_method, default_value = "morcgp")]
    pub model: Method,
    /// Row of the contaminated entry [default: N/2].
    #[arg(long)]
    pub row: Option<usize>,
    /// Channel of the contaminated entry (zero-based).
    #[arg(long, default_value_t = 0)]
    pub channel_contaminate: usize,
    /// Comma-separated, strictly increasing contamination magnitudes.
    #[arg(long, default_value = "10,100,1000")]
    pub magnitudes: String,
    /// Weight outlier fraction when the parameters file carries no weights.
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV: magnitude, kl_1..kl_T.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// TOML scenario.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in scenario: clean, contaminated, focused-interval, mahalanobis-s<k> [default: contaminated].
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Data CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Latent values at the inputs: x_1..x_d, f_1..f_T.
    #[arg(long)]
    pub truth: PathBuf,
    /// Contaminated entries: row, channel (zero-based).
    #[arg(long)]
    pub outliers: PathBuf,
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "mogp" => Ok(Method::Mogp),
        "morcgp" => Ok(Method::Morcgp),
        "morcgp-naive" => Ok(Method::MorcgpNaive),
        _ => Err(format!("unknown method `{s}` (mogp, morcgp, morcgp-naive)")),
    }
}

fn parse_prior(s: &str) -> Result<ModelPrior, String> {
    match s {
        "zero" => Ok(ModelPrior::Zero),
        "empirical" => Ok(ModelPrior::Empirical),
        _ => Err(format!("unknown prior mean `{s}` (zero, empirical)")),
    }
}

fn parse_magnitudes(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| CliError::Usage(format!("invalid magnitude `{v}`"))))
        .collect()
}

pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Fit(a) => {
            let mut settings = match &a.config {
                Some(p) => load_toml::<FitSettings>(p)?,
                None => FitSettings::default(),
            };
            if let Some(m) = a.method {
                settings.method = m;
            }
            if let Some(e) = a.epsilon {
                settings.epsilon = e;
            }
            if let Some(p) = a.prior_mean {
                settings.prior_mean = p;
            }
            if let Some(s) = a.seed {
                settings.fit.seed = s;
            }
            commands::fit_command(&a.data, &settings, &a.out)
        }
        Command::Predict(a) => commands::predict_command(&a.params, &a.data, &a.query, a.noise, &a.out),
        Command::Benchmark(a) => {
            let mut config: BenchmarkConfig = match (&a.config, &a.preset) {
                (Some(p), _) => load_toml(p)?,
                (None, Some(name)) => preset_benchmark(name)?,
                (None, None) => preset_benchmark("table1")?,
            };
            if let Some(s) = &a.seeds {
                config.seeds = parse_seeds(s)?;
            }
            config.timings |= a.timings;
            commands::benchmark_command(&config, &a.out, a.json.as_deref())
        }
        Command::Pif(a) => {
            let req = commands::PifRequest {
                data: a.data,
                params: a.params,
                model: a.model,
                row: a.row,
                channel: a.channel_contaminate,
                magnitudes: parse_magnitudes(&a.magnitudes)?,
                seed: a.seed,
                epsilon: a.epsilon,
            };
            commands::pif_command(&req, &a.out)
        }
        Command::Simulate(a) => {
            let scenario: Scenario = match (&a.config, &a.preset) {
                (Some(p), _) => load_toml(p)?,
                (None, Some(name)) => preset_scenario(name)?,
                (None, None) => preset_scenario("contaminated")?,
            };
            commands::simulate_command(&scenario, a.seed, &a.out, &a.truth, &a.outliers)
        }
    }
}
