//! Dual versus primal worst-case means on random finite instances.

use anyhow::{bail, Result};
use drbc_core::priors::cressie_read_primal_inf;
use drbc_core::{
    cressie_read_dual, derive_seed, maximize_kl_dual, primal_inner_inf, rng_from_seed, AscentConfig, ExactFiniteOracle,
    FinitePrior, SimRng,
};
use rand::Rng;
use rayon::prelude::*;
use serde_json::json;

use super::RunOptions;
use crate::config::{check_replications, Config};
use crate::report::{Report, ReportRow};

const NAME: &str = "duality_check";
const TOL: f64 = 1e-3;
const GRID_POINTS: usize = 200_000;

struct Instance {
    probs: Vec<f64>,
    z: Vec<f64>,
    delta: f64,
}

struct Errors {
    kl: f64,
    cr: f64,
    /// against a one-dimensional simplex grid, two-atom instances only
    cr_grid: Option<f64>,
    kl_zero: f64,
    cr_zero: f64,
}

fn draw(rng: &mut SimRng, atoms: (usize, usize), deltas: (f64, f64)) -> Instance {
    let n = rng.random_range(atoms.0..=atoms.1);
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
    let total: f64 = raw.iter().sum();
    let probs = raw.iter().map(|v| v / total).collect();
    let z = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let delta = if deltas.0 == deltas.1 { deltas.0 } else { rng.random_range(deltas.0.ln()..deltas.1.ln()).exp() };
    Instance { probs, z, delta }
}

/// `min q z1 + (1 - q) z2` over a uniform grid of `q` inside the ball.
fn cr_two_atom_grid(inst: &Instance, k: f64) -> f64 {
    let (p, z) = (&inst.probs, &inst.z);
    let f = |x: f64| (x.powf(k) - k * x + k - 1.0) / (k * (k - 1.0));
    (0..=GRID_POINTS)
        .map(|i| i as f64 / GRID_POINTS as f64)
        .filter(|&q| p[0] * f(q / p[0]) + p[1] * f((1.0 - q) / p[1]) <= inst.delta)
        .map(|q| q * z[0] + (1.0 - q) * z[1])
        .fold(f64::INFINITY, f64::min)
}

fn check_instance(inst: &Instance, k: f64) -> Result<Errors> {
    let values: Vec<f64> = (0..inst.probs.len()).map(|i| i as f64).collect();
    let prior = FinitePrior::scalar(&values, &inst.probs)?;
    let ascent = AscentConfig::default();
    let mut oracle = ExactFiniteOracle::new(inst.probs.clone(), inst.z.clone())?;
    let kl_dual = maximize_kl_dual(&mut oracle, inst.delta, &ascent)?.robust_value;
    let kl = (kl_dual - primal_inner_inf(&prior, &inst.z, inst.delta)?).abs();
    let (cr_dual, _) = cressie_read_dual(&inst.z, &inst.probs, k, inst.delta, None)?;
    let cr = (cr_dual - cressie_read_primal_inf(&prior, &inst.z, k, inst.delta)?).abs();
    let cr_grid = (inst.probs.len() == 2).then(|| (cr_dual - cr_two_atom_grid(inst, k)).abs());

    let mean: f64 = inst.probs.iter().zip(&inst.z).map(|(p, z)| p * z).sum();
    // the KL dual needs a positive radius; at zero the primal tilt is checked instead
    let kl_zero = (primal_inner_inf(&prior, &inst.z, 0.0)? - mean).abs();
    let cr_zero = (cressie_read_dual(&inst.z, &inst.probs, k, 0.0, None)?.0 - mean).abs();
    Ok(Errors { kl, cr, cr_grid, kl_zero, cr_zero })
}

pub(super) fn run(cfg: &Config, opts: RunOptions) -> Result<Report> {
    let count = cfg.replications.unwrap_or(1000);
    check_replications(count, "random instances")?;
    let k = cfg.cr_order.unwrap_or(2.0);
    if !(k > 1.0 && k.is_finite()) {
        bail!("`cr_order` = {k} is invalid: the Cressie-Read order must exceed 1");
    }
    let atoms = (cfg.min_atoms.unwrap_or(2), cfg.max_atoms.unwrap_or(10));
    if atoms.0 < 2 || atoms.1 < atoms.0 {
        bail!("atom counts must satisfy 2 <= `min_atoms` <= `max_atoms`, got {} and {}", atoms.0, atoms.1);
    }
    let deltas = (cfg.delta_min.unwrap_or(1e-3), cfg.delta_max.unwrap_or(2.0));
    if !(deltas.0 > 0.0 && deltas.1 >= deltas.0 && deltas.1.is_finite()) {
        bail!("radii must satisfy 0 < `delta_min` <= `delta_max`, got {} and {}", deltas.0, deltas.1);
    }

    let errors: Vec<Errors> = (0..count as u64)
        .into_par_iter()
        .map(|i| check_instance(&draw(&mut rng_from_seed(derive_seed(opts.seed, i)), atoms, deltas), k))
        .collect::<Result<_>>()?;

    let mut report = Report::new(
        NAME,
        opts.seed,
        json!({
            "instances": count, "cr_order": k, "min_atoms": atoms.0, "max_atoms": atoms.1,
            "delta_min": deltas.0, "delta_max": deltas.1, "grid_points": GRID_POINTS,
        }),
    );
    let mut summarize = |method: &str, tol: f64, values: Vec<f64>| {
        let worst = values.iter().copied().fold(0.0, f64::max);
        let mut row = ReportRow::from_values(NAME, method, "max_abs_error", &values);
        row.mean = worst;
        row.std = None;
        report.push(row);
        report.push(ReportRow::from_values(NAME, method, "abs_error", &values));
        report.check(
            &format!("{method}_within_{tol:e}"),
            worst <= tol,
            format!("max abs error {worst:.3e} over {} instances", values.len()),
        );
    };
    summarize("kl", TOL, errors.iter().map(|e| e.kl).collect());
    summarize("cressie_read", TOL, errors.iter().map(|e| e.cr).collect());
    let grid: Vec<f64> = errors.iter().filter_map(|e| e.cr_grid).collect();
    if !grid.is_empty() {
        summarize("cressie_read_grid", TOL, grid);
    }
    summarize("kl_primal_zero_radius", 1e-9, errors.iter().map(|e| e.kl_zero).collect());
    summarize("cressie_read_zero_radius", 1e-9, errors.iter().map(|e| e.cr_zero).collect());
    Ok(report)
}
