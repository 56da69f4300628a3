//! Batch runner for the robust Bayesian control studies.
//!
//! Each run writes `<experiment>.csv` (one row per reported cell) and
//! `<experiment>.json` (schema version, resolved parameters and the pass/fail
//! status of every asserted property).

pub mod config;
pub mod experiments;
pub mod report;

use anyhow::Result;
use std::path::{Path, PathBuf};

pub use config::Config;
pub use experiments::{Experiment, RunOptions, DEFAULT_SEED};
pub use report::{Property, Report, ReportRow};

pub const DEFAULT_OUT_DIR: &str = "results";

/// Command-line overrides on top of a config file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub full: bool,
}

/// Runs `experiment` from an in-memory config; flags win over config keys.
pub fn run_config(experiment: Experiment, cfg: &Config, overrides: &Overrides) -> Result<Report> {
    let seed = overrides.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    experiments::run(experiment, cfg, RunOptions { seed, full: overrides.full })
}

/// Output directory: `--out`, then the config's `out`, then [`DEFAULT_OUT_DIR`].
pub fn out_dir(cfg: &Config, overrides: &Overrides) -> PathBuf {
    overrides
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Loads the config, runs the experiment and writes its report files.
pub fn run_file(experiment: Experiment, config: &Path, overrides: &Overrides) -> Result<(Report, PathBuf, PathBuf)> {
    let cfg = Config::load(config)?;
    let report = run_config(experiment, &cfg, overrides)?;
    let (csv, json) = report.write(&out_dir(&cfg, overrides))?;
    Ok((report, csv, json))
}
