//! Flat TOML experiment configuration.
//!
//! Every key is optional; each experiment fills the gaps from its own defaults
//! (desk scale, or full scale under `--full`) and validates the result.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::experiments::Experiment;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub experiment: Option<Experiment>,
    pub seed: Option<u64>,
    /// Replications, paths, runs or random instances, depending on the experiment.
    pub replications: Option<usize>,
    pub out: Option<String>,

    // market
    pub r: Option<f64>,
    pub sigma: Option<f64>,
    pub horizon: Option<f64>,
    pub x0: Option<f64>,
    pub alpha: Option<f64>,
    pub steps: Option<usize>,

    // priors
    pub prior_values: Option<Vec<f64>>,
    pub prior_probs: Option<Vec<f64>>,
    pub correct_probs: Option<Vec<f64>>,
    pub true_drift: Option<f64>,

    // robustness and estimation
    pub deltas: Option<Vec<f64>>,
    pub n_grid: Option<Vec<usize>>,
    pub ratio: Option<f64>,
    pub n0: Option<u32>,
    pub fraction: Option<f64>,
    pub quadrature_nodes: Option<usize>,

    // cosine-drift ablation
    pub b0: Option<f64>,
    pub kappa: Option<f64>,

    // LQ
    pub d: Option<usize>,
    pub k: Option<usize>,
    pub m: Option<usize>,
    pub sigma_true: Option<f64>,
    pub sigma_nom: Option<f64>,
    pub eval_rollouts: Option<usize>,
    pub c_lam: Option<f64>,
    pub n_theta: Option<usize>,
    pub b_traj: Option<usize>,
    pub s_in: Option<usize>,
    pub eta: Option<f64>,
    pub perturb: Option<f64>,
    pub basis_size: Option<usize>,
    pub explore_scale: Option<f64>,
    pub ridge: Option<f64>,

    // duality check
    pub cr_order: Option<f64>,
    pub min_atoms: Option<usize>,
    pub max_atoms: Option<usize>,
    pub delta_min: Option<f64>,
    pub delta_max: Option<f64>,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("invalid configuration")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }
}

pub(crate) fn check_replications(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        bail!("`replications` must be at least 1 ({what})");
    }
    Ok(())
}

pub(crate) fn check_deltas(deltas: &[f64], allow_zero: bool) -> Result<()> {
    if deltas.is_empty() {
        bail!("`deltas` must list at least one radius");
    }
    for &d in deltas {
        if !d.is_finite() || d < 0.0 {
            bail!("radius {d} in `deltas` is invalid: radii must be finite and >= 0");
        }
        if d == 0.0 && !allow_zero {
            bail!("radius 0 in `deltas` is not allowed here: use a positive radius");
        }
    }
    Ok(())
}

pub(crate) fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.5 && ratio < 0.75) {
        bail!("`ratio` = {ratio} is invalid: the geometric level ratio R must lie in (1/2, 3/4)");
    }
    Ok(())
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        bail!("`alpha` = {alpha} is invalid: the utility exponent must lie in (0, 1)");
    }
    Ok(())
}

pub(crate) fn check_positive(value: f64, key: &str) -> Result<()> {
    if !(value.is_finite() && value > 0.0) {
        bail!("`{key}` = {value} is invalid: must be positive");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_keys() {
        let c =
            Config::from_toml("experiment = \"rate_table\"\nseed = 3\ndeltas = [0.01, 0.1]\nratio = 0.6\n").unwrap();
        assert_eq!(c.experiment, Some(Experiment::RateTable));
        assert_eq!(c.seed, Some(3));
        assert_eq!(c.deltas.as_deref(), Some(&[0.01, 0.1][..]));
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(Config::from_toml("delta = 0.1\n").is_err());
    }

    #[test]
    fn validators_explain_themselves() {
        let e = check_deltas(&[0.1, -0.2], true).unwrap_err().to_string();
        assert!(e.contains("-0.2"));
        assert!(check_ratio(0.75).unwrap_err().to_string().contains("(1/2, 3/4)"));
        assert!(check_alpha(1.0).is_err());
        assert!(check_replications(0, "paths").is_err());
        assert!(check_deltas(&[0.0], false).is_err());
    }
}
