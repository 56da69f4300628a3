//! Gap to the oracle controller for plug-in and DRBC linear–quadratic control
//! when the training prior is wider than the law of the true parameter.

use anyhow::{bail, Result};
use drbc_core::lq::{mean_rollout_reward, random_gain};
use drbc_core::{
    derive_seed, drbc_lq_learn, make_noise, plugin_controller, riccati_solve, rng_from_seed, simulate_lq,
    GaussianPrior, LqBenchmark, LqLearnConfig, LqModel, LqPolicy, Prior,
};
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde_json::json;

use super::{pooled_se, RunOptions};
use crate::config::{check_deltas, check_positive, check_replications, Config};
use crate::report::{mean_std, std_err, Report, ReportRow};

const NAME: &str = "lq_compare";

/// Everything measured in one run.
struct RunOutcome {
    oracle: f64,
    plugin: f64,
    drbc: Vec<f64>,
    /// whether the learning curve did not drift down, per radius
    trend_ok: Vec<bool>,
}

fn learning_trend_ok(history: &[f64]) -> bool {
    let q = history.len() / 4;
    if q < 2 {
        return true;
    }
    let (first, last) = (&history[..q], &history[history.len() - q..]);
    let se = pooled_se(std_err(first), std_err(last));
    mean_std(last).0 >= mean_std(first).0 - 2.0 * se
}

pub(super) fn run(cfg: &Config, opts: RunOptions) -> Result<Report> {
    let full = opts.full;
    let runs = cfg.replications.unwrap_or(if full { 100 } else { 30 });
    check_replications(runs, "independent runs")?;
    let deltas = cfg.deltas.clone().unwrap_or_else(|| vec![0.01, 0.05, 0.1]);
    check_deltas(&deltas, false)?;
    let bench = LqBenchmark {
        d: cfg.d.unwrap_or(if full { 10 } else { 4 }),
        k: cfg.k.unwrap_or(if full { 5 } else { 2 }),
        m: cfg.m.unwrap_or(if full { 10 } else { 4 }),
        horizon: cfg.horizon.unwrap_or(2.0),
        steps: cfg.steps.unwrap_or(100),
        ..LqBenchmark::default()
    };
    if bench.d == 0 || bench.k == 0 || bench.k > bench.d {
        bail!("need 1 <= k <= d, got d = {}, k = {}", bench.d, bench.k);
    }
    check_positive(bench.horizon, "horizon")?;
    if bench.steps == 0 {
        bail!("`steps` must be at least 1");
    }
    let model = LqModel::benchmark(&bench)?;
    let sigma_true = cfg.sigma_true.unwrap_or(0.5);
    let sigma_nom = cfg.sigma_nom.unwrap_or(1.0);
    check_positive(sigma_true, "sigma_true")?;
    check_positive(sigma_nom, "sigma_nom")?;
    let eval_rollouts = cfg.eval_rollouts.unwrap_or(if full { 512 } else { 128 });
    if eval_rollouts == 0 {
        bail!("`eval_rollouts` must be at least 1");
    }
    let defaults = LqLearnConfig::default();
    let learn = LqLearnConfig {
        c_lam: cfg.c_lam.unwrap_or(defaults.c_lam),
        n_theta: cfg.n_theta.unwrap_or(if full { 32 } else { 16 }),
        b_traj: cfg.b_traj.unwrap_or(if full { 64 } else { 16 }),
        s_in: cfg.s_in.unwrap_or(if full { 200 } else { 60 }),
        eta: cfg.eta.unwrap_or(defaults.eta),
        perturb: cfg.perturb.unwrap_or(defaults.perturb),
        basis_size: cfg.basis_size.unwrap_or(defaults.basis_size),
        ..defaults
    };
    check_positive(learn.c_lam, "c_lam")?;
    if learn.n_theta == 0 || learn.b_traj == 0 {
        bail!("`n_theta` and `b_traj` must be at least 1");
    }
    let explore_scale = cfg.explore_scale.unwrap_or(0.3);
    let ridge = cfg.ridge.unwrap_or(0.0);
    if ridge.is_nan() || ridge < 0.0 {
        bail!("`ridge` = {ridge} is invalid: must be >= 0");
    }
    let p = model.param_dim();
    let prior = Prior::from(GaussianPrior::new(vec![0.0; p], sigma_nom)?);
    let truth_law = Normal::new(0.0, sigma_true)?;

    let outcomes: Vec<RunOutcome> = (0..runs as u64)
        .into_par_iter()
        .map(|run| {
            let run_seed = derive_seed(opts.seed, run);
            let mut rng = rng_from_seed(derive_seed(run_seed, 0));
            let theta: Vec<f64> = (0..p).map(|_| truth_law.sample(&mut rng)).collect();
            let x0: Vec<f64> = (0..model.state_dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let explore = LqPolicy::constant(
                random_gain(&model, explore_scale, derive_seed(run_seed, 1)),
                model.grid.steps(),
                LqPolicy::DEFAULT_U_MAX,
            )?;
            let noise = make_noise(derive_seed(run_seed, 2), model.grid, model.noise_dim());
            let id = simulate_lq(&model, &theta, &explore, &noise, &x0)?;
            let (belief, plugin) = plugin_controller(&id, &model, ridge)?;
            let a_true = model.drift(&theta)?;
            let oracle = riccati_solve(&model, &a_true)?.policy;

            let eval_seed = derive_seed(run_seed, 3);
            let reward = |pol: &LqPolicy| mean_rollout_reward(&model, &a_true, pol, eval_rollouts, eval_seed);
            let r_oracle = reward(&oracle);
            let mut drbc = Vec::with_capacity(deltas.len());
            let mut trend_ok = Vec::with_capacity(deltas.len());
            for (di, &delta) in deltas.iter().enumerate() {
                let res = drbc_lq_learn(&model, &prior, delta, &learn, &belief, derive_seed(run_seed, 10 + di as u64))?;
                drbc.push(r_oracle - reward(&res.policy));
                trend_ok.push(learning_trend_ok(&res.history));
            }
            Ok(RunOutcome { oracle: r_oracle, plugin: r_oracle - reward(&plugin), drbc, trend_ok })
        })
        .collect::<Result<_>>()?;

    let mut report = Report::new(
        NAME,
        opts.seed,
        json!({
            "runs": runs, "deltas": deltas, "benchmark": bench, "sigma_true": sigma_true, "sigma_nom": sigma_nom,
            "eval_rollouts": eval_rollouts, "learn": learn, "explore_scale": explore_scale, "ridge": ridge,
        }),
    );
    let oracle_reward: Vec<f64> = outcomes.iter().map(|o| o.oracle).collect();
    let plugin_gap: Vec<f64> = outcomes.iter().map(|o| o.plugin).collect();
    report.push(ReportRow::from_values(NAME, "oracle", "reward", &oracle_reward));
    report.push(ReportRow::from_values(NAME, "oracle", "gap", &vec![0.0; runs]));
    report.push(ReportRow::from_values(NAME, "plugin", "gap", &plugin_gap));
    let (m_plugin, s_plugin) = mean_std(&plugin_gap);
    for (di, &delta) in deltas.iter().enumerate() {
        let gap: Vec<f64> = outcomes.iter().map(|o| o.drbc[di]).collect();
        report.push(ReportRow::from_values(NAME, "drbc", "gap", &gap).with_delta(delta));
        let (m, s) = mean_std(&gap);
        report.check(
            &format!("drbc_mean_gap_below_plugin_delta_{delta}"),
            m < m_plugin,
            format!("drbc {m:.4} vs plug-in {m_plugin:.4}"),
        );
        if let (Some(s), Some(sp)) = (s, s_plugin) {
            report.check(
                &format!("drbc_gap_std_below_half_plugin_delta_{delta}"),
                s < 0.5 * sp,
                format!("drbc std {s:.4} vs 0.5 x plug-in std {:.4}", 0.5 * sp),
            );
        }
    }
    let trend: Vec<bool> = outcomes.iter().flat_map(|o| o.trend_ok.iter().copied()).collect();
    let share = trend.iter().filter(|&&t| t).count() as f64 / trend.len() as f64;
    report.check(
        "learning_curves_non_decreasing",
        share >= 0.9,
        format!(
            "last-quarter objective within 2 SE of the first quarter or above in {:.1}% of trainings",
            100.0 * share
        ),
    );
    Ok(report)
}
