//! The six batch studies and their shared defaults.

mod duality_check;
mod gap_vs_delta;
mod lq_compare;
mod rate_table;
mod settings;

use anyhow::{bail, Result};
use clap::ValueEnum;
use drbc_core::quadrature::DEFAULT_NODES;
use drbc_core::sde::simulate_wealth_with_drift;
use drbc_core::{derive_seed, make_noise, FinitePrior, FractionPolicy, MertonMarket, QuadratureRule};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::config::{check_alpha, check_positive, Config};
use crate::report::Report;

pub const DEFAULT_SEED: u64 = 0;

/// Support and weights of the baseline five-atom drift prior.
pub const BASE_VALUES: [f64; 5] = [0.01, 0.46, 0.30, 0.21, 0.27];
pub const BASE_PROBS: [f64; 5] = [0.05, 0.35, 0.35, 0.15, 0.1];
/// Misspecified and true weights on the same support.
pub const INCORRECT_PROBS: [f64; 5] = [0.5, 0.05, 0.2, 0.15, 0.1];
pub const CORRECT_PROBS: [f64; 5] = [0.05, 0.5, 0.1, 0.15, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Experiment {
    RateTable,
    GapVsDelta,
    Setting1,
    Setting2,
    LqCompare,
    DualityCheck,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::RateTable,
        Experiment::GapVsDelta,
        Experiment::Setting1,
        Experiment::Setting2,
        Experiment::LqCompare,
        Experiment::DualityCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::RateTable => "rate_table",
            Experiment::GapVsDelta => "gap_vs_delta",
            Experiment::Setting1 => "setting1",
            Experiment::Setting2 => "setting2",
            Experiment::LqCompare => "lq_compare",
            Experiment::DualityCheck => "duality_check",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Resolved run options shared by every experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub seed: u64,
    /// full-scale defaults instead of desk-scale ones
    pub full: bool,
}

/// Runs `experiment` with the already resolved seed in `opts`.
pub fn run(experiment: Experiment, cfg: &Config, opts: RunOptions) -> Result<Report> {
    if let Some(named) = cfg.experiment {
        if named != experiment {
            bail!("config is for experiment `{named}` but `{experiment}` was requested");
        }
    }
    match experiment {
        Experiment::RateTable => rate_table::run(cfg, opts),
        Experiment::GapVsDelta => gap_vs_delta::run(cfg, opts),
        Experiment::Setting1 => settings::run_setting1(cfg, opts),
        Experiment::Setting2 => settings::run_setting2(cfg, opts),
        Experiment::LqCompare => lq_compare::run(cfg, opts),
        Experiment::DualityCheck => duality_check::run(cfg, opts),
    }
}

/// Market from the config with defaults `r = 0.05`, `sigma = 0.4`, `T = 1`,
/// `x0 = 1`, `alpha = 0.5`.
pub(crate) fn market(cfg: &Config, default_steps: usize) -> Result<MertonMarket> {
    let alpha = cfg.alpha.unwrap_or(0.5);
    check_alpha(alpha)?;
    let sigma = cfg.sigma.unwrap_or(0.4);
    check_positive(sigma, "sigma")?;
    let horizon = cfg.horizon.unwrap_or(1.0);
    check_positive(horizon, "horizon")?;
    let x0 = cfg.x0.unwrap_or(1.0);
    check_positive(x0, "x0")?;
    let steps = cfg.steps.unwrap_or(default_steps);
    if steps == 0 {
        bail!("`steps` must be at least 1");
    }
    Ok(MertonMarket::new(cfg.r.unwrap_or(0.05), sigma, horizon, x0, alpha, steps)?)
}

pub(crate) fn prior_values(cfg: &Config) -> Vec<f64> {
    cfg.prior_values.clone().unwrap_or_else(|| BASE_VALUES.to_vec())
}

pub(crate) fn finite_prior(values: &[f64], probs: &[f64], key: &str) -> Result<FinitePrior> {
    if values.len() != probs.len() {
        bail!("`{key}` has {} weights but `prior_values` has {} atoms", probs.len(), values.len());
    }
    FinitePrior::scalar(values, probs).map_err(|e| anyhow::anyhow!("`{key}` is not a valid prior: {e}"))
}

pub(crate) fn quadrature(cfg: &Config) -> Result<QuadratureRule> {
    let n = cfg.quadrature_nodes.unwrap_or(DEFAULT_NODES);
    if !(2..=256).contains(&n) {
        bail!("`quadrature_nodes` = {n} is invalid: use between 2 and 256 nodes");
    }
    Ok(QuadratureRule::gauss_hermite(n))
}

/// Terminal wealths `[policy][path]`; path `i` uses the noise seeded by
/// `derive_seed(seed, i)` for every policy and the drift `drift(i, t)`.
pub(crate) fn terminal_wealths<D>(
    market: &MertonMarket,
    policies: &[&FractionPolicy],
    paths: usize,
    seed: u64,
    drift: D,
) -> Result<Vec<Vec<f64>>>
where
    D: Fn(u64, f64) -> f64 + Sync,
{
    let per_path: Vec<Vec<f64>> = (0..paths as u64)
        .into_par_iter()
        .map(|i| {
            let noise = make_noise(derive_seed(seed, i), market.grid, 1);
            policies
                .iter()
                .map(|p| Ok(simulate_wealth_with_drift(market, |t| drift(i, t), *p, &noise)?.terminal()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok((0..policies.len()).map(|j| per_path.iter().map(|row| row[j]).collect()).collect())
}

/// `sqrt(se_a^2 + se_b^2)`
pub(crate) fn pooled_se(se_a: f64, se_b: f64) -> f64 {
    (se_a * se_a + se_b * se_b).sqrt()
}
