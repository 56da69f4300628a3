//! Robust value estimates of a fixed policy against the outer sample size.

use anyhow::{bail, Result};
use drbc_core::merton::UtilitySampler;
use drbc_core::{derive_seed, maximize_kl_dual, AscentConfig, FractionPolicy, Prior, RmlmcBatch, RmlmcParams};
use rayon::prelude::*;
use serde_json::json;

use super::{finite_prior, market, pooled_se, prior_values, RunOptions, BASE_PROBS};
use crate::config::{check_deltas, check_ratio, check_replications, Config};
use crate::report::{mean_std, Report, ReportRow};

const NAME: &str = "rate_table";
const PILOT_STREAM: u64 = u64::MAX;

pub(super) fn run(cfg: &Config, opts: RunOptions) -> Result<Report> {
    let reps = cfg.replications.unwrap_or(100);
    check_replications(reps, "estimator replications")?;
    let deltas = cfg.deltas.clone().unwrap_or_else(|| vec![0.01, 0.1]);
    check_deltas(&deltas, false)?;
    let n_grid = cfg.n_grid.clone().unwrap_or_else(|| vec![100, 1000, 10_000]);
    if n_grid.is_empty() || n_grid.contains(&0) || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        bail!("`n_grid` must list positive outer sample sizes in increasing order");
    }
    let ratio = cfg.ratio.unwrap_or(RmlmcParams::DEFAULT_RATIO);
    check_ratio(ratio)?;
    let params = RmlmcParams::new(ratio, cfg.n0.unwrap_or(RmlmcParams::DEFAULT_N0))?;
    let market = market(cfg, if opts.full { 1000 } else { 250 })?;
    let values = prior_values(cfg);
    let probs = cfg.prior_probs.clone().unwrap_or_else(|| BASE_PROBS.to_vec());
    let prior = finite_prior(&values, &probs, "prior_probs")?;
    let fraction = cfg.fraction.unwrap_or_else(|| market.merton_fraction(prior.mean()[0]));
    let policy = FractionPolicy::constant(fraction);
    let sampler = UtilitySampler { market: &market, policy: &policy };
    let wrapped = Prior::from(prior.clone());
    let ascent = AscentConfig::default();

    // lambda* per radius from a pilot batch at the largest sample size; the
    // replications then evaluate the plug-in dual objective at that lambda*
    let n_pilot = *n_grid.iter().max().expect("non-empty");
    let mut pilot = RmlmcBatch::draw(&sampler, &wrapped, &params, n_pilot, derive_seed(opts.seed, PILOT_STREAM))?;
    let lambdas: Vec<f64> =
        deltas.iter().map(|&d| Ok(maximize_kl_dual(&mut pilot, d, &ascent)?.lambda_star)).collect::<Result<_>>()?;

    // estimates[rep][n][delta]
    let estimates: Vec<Vec<Vec<f64>>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            n_grid
                .iter()
                .map(|&n| {
                    let batch = RmlmcBatch::draw(
                        &sampler,
                        &wrapped,
                        &params,
                        n,
                        derive_seed(derive_seed(opts.seed, n as u64), rep),
                    )?;
                    deltas
                        .iter()
                        .zip(&lambdas)
                        .map(|(&d, &lambda)| Ok(batch.point(lambda)?.objective(lambda, d)))
                        .collect()
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut report = Report::new(
        NAME,
        opts.seed,
        json!({
            "replications": reps, "deltas": deltas, "n_grid": n_grid, "ratio": ratio, "n0": params.n0(),
            "lambda_star": lambdas, "pilot_n": n_pilot,
            "market": market, "prior": prior, "policy": policy.snapshot(),
        }),
    );
    let column = |ni: usize, di: usize| -> Vec<f64> { estimates.iter().map(|e| e[ni][di]).collect() };
    for (di, &delta) in deltas.iter().enumerate() {
        for (ni, &n) in n_grid.iter().enumerate() {
            report.push(
                ReportRow::from_values(NAME, "robust_value", "estimate", &column(ni, di)).with_delta(delta).with_n(n),
            );
        }
    }

    if reps < 2 {
        report.check("std_undefined", true, "a single replication has no standard deviation".into());
        return Ok(report);
    }
    // the sqrt(n) scaling between the smallest and largest sample sizes
    let (lo, hi) = (0, n_grid.len() - 1);
    let expected = (n_grid[lo] as f64 / n_grid[hi] as f64).sqrt();
    for (di, &delta) in deltas.iter().enumerate() {
        let (m_lo, s_lo) = mean_std(&column(lo, di));
        let (m_hi, s_hi) = mean_std(&column(hi, di));
        let (s_lo, s_hi) = (s_lo.unwrap_or(0.0), s_hi.unwrap_or(0.0));
        if hi > lo {
            let ratio = s_hi / s_lo;
            let passed = ratio >= 0.67 * expected && ratio <= 1.5 * expected;
            report.check(
                &format!("sqrt_n_rate_delta_{delta}"),
                passed,
                format!(
                    "std ratio n={} vs n={}: {ratio:.4} (theory {expected:.4}, band [{:.4}, {:.4}])",
                    n_grid[hi],
                    n_grid[lo],
                    0.67 * expected,
                    1.5 * expected
                ),
            );
        }
        let sqrt_reps = (reps as f64).sqrt();
        let mut worst: f64 = 0.0;
        for a in 0..n_grid.len() {
            for b in a + 1..n_grid.len() {
                let (ma, sa) = mean_std(&column(a, di));
                let (mb, sb) = mean_std(&column(b, di));
                let se = pooled_se(sa.unwrap_or(0.0) / sqrt_reps, sb.unwrap_or(0.0) / sqrt_reps);
                worst = worst.max((ma - mb).abs() / se);
            }
        }
        report.check(
            &format!("means_stable_delta_{delta}"),
            worst <= 3.0,
            format!("largest pairwise mean difference across n: {worst:.3} pooled SE (means {m_lo:.5} .. {m_hi:.5})"),
        );
    }
    Ok(report)
}
