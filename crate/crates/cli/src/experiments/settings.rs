//! Portfolio comparisons on matched market paths under a misspecified prior.
//!
//! Setting 1 draws the true drift per path from the correct prior; Setting 2
//! fixes it. In both, DRBC is trained on the incorrect prior.

use anyhow::{bail, Result};
use drbc_core::{
    derive_seed, drbc_finite_solve, rng_from_seed, sharpe_and_utility, FinitePrior, FractionPolicy, LearnSchedule,
    MertonMarket,
};
use rayon::prelude::*;
use serde_json::{json, Value};

use super::{
    finite_prior, market, pooled_se, prior_values, quadrature, terminal_wealths, RunOptions, CORRECT_PROBS,
    INCORRECT_PROBS,
};
use crate::config::{check_deltas, check_replications, Config};
use crate::report::{Report, ReportRow};

/// Stream index for the per-path true drift, kept apart from the noise seeds.
const TRUTH_STREAM: u64 = u64::MAX;

struct Common {
    paths: usize,
    deltas: Vec<f64>,
    market: MertonMarket,
    incorrect: FinitePrior,
    drbc: Vec<FractionPolicy>,
}

fn common(cfg: &Config, opts: RunOptions) -> Result<Common> {
    let paths = cfg.replications.unwrap_or(200);
    check_replications(paths, "market paths")?;
    if paths < 2 {
        bail!("`replications` must be at least 2 market paths to estimate a standard error");
    }
    let deltas = cfg.deltas.clone().unwrap_or_else(|| vec![1e-3, 1e-2]);
    check_deltas(&deltas, false)?;
    let market = market(cfg, if opts.full { 1000 } else { 250 })?;
    let quad = quadrature(cfg)?;
    let values = prior_values(cfg);
    let probs = cfg.prior_probs.clone().unwrap_or_else(|| INCORRECT_PROBS.to_vec());
    let incorrect = finite_prior(&values, &probs, "prior_probs")?;
    let drbc = deltas
        .par_iter()
        .map(|&delta| {
            let sol = drbc_finite_solve(&incorrect, &market, delta, &LearnSchedule::default(), &quad)?;
            Ok(FractionPolicy::drbc(&sol.q, delta, sol.lambda, &market, &quad)?)
        })
        .collect::<Result<_>>()?;
    Ok(Common { paths, deltas, market, incorrect, drbc })
}

/// Utility and Sharpe rows; returns `(mean utility, standard error)`.
///
/// The Sharpe row's `std` is the large-sample value `sqrt(1 + SR^2 / 2)`, so
/// that `std / sqrt(n)` is its standard error like every other row.
fn summarize(
    report: &mut Report,
    name: &str,
    method: &str,
    delta: Option<f64>,
    terminals: &[f64],
    market: &MertonMarket,
) -> Result<(f64, f64)> {
    let perf = sharpe_and_utility(terminals, market)?;
    let utils: Vec<f64> = terminals.iter().map(|&x| market.utility(x)).collect();
    let mut u = ReportRow::from_values(name, method, "utility", &utils);
    let mut s = ReportRow::from_values(name, method, "sharpe", &[perf.sharpe]);
    s.std = Some((1.0 + 0.5 * perf.sharpe * perf.sharpe).sqrt());
    s.replications = terminals.len();
    if let Some(d) = delta {
        u = u.with_delta(d);
        s = s.with_delta(d);
    }
    report.push(u);
    report.push(s);
    Ok((perf.mean_utility, perf.utility_se))
}

/// Asserts `hi - lo > 2` pooled standard errors.
fn check_order(report: &mut Report, name: &str, hi: (&str, (f64, f64)), lo: (&str, (f64, f64))) {
    let se = pooled_se(hi.1 .1, lo.1 .1);
    let margin = (hi.1 .0 - lo.1 .0) / se;
    report.check(
        name,
        margin > 2.0,
        format!("{} {:.5} vs {} {:.5}: difference {margin:.3} pooled SE (needs > 2)", hi.0, hi.1 .0, lo.0, lo.1 .0),
    );
}

fn check_stability(report: &mut Report, c: &Common, utilities: &[(f64, f64)]) {
    if c.deltas.len() < 2 {
        return;
    }
    let (first, last) = (utilities[0].0, utilities[c.deltas.len() - 1].0);
    let change = (last - first).abs() / first.abs();
    report.check(
        "drbc_stable_across_delta",
        change < 0.01,
        format!(
            "drbc utility {first:.5} at delta {} vs {last:.5} at delta {}: relative change {change:.5}",
            c.deltas[0],
            c.deltas[c.deltas.len() - 1]
        ),
    );
}

fn params(c: &Common, extra: Value) -> Value {
    json!({
        "paths": c.paths, "deltas": c.deltas, "market": c.market, "incorrect_prior": c.incorrect,
        "drbc": c.drbc.iter().map(|p| p.snapshot()).collect::<Vec<_>>(), "truth": extra,
    })
}

pub(super) fn run_setting1(cfg: &Config, opts: RunOptions) -> Result<Report> {
    const NAME: &str = "setting1";
    let c = common(cfg, opts)?;
    let quad = quadrature(cfg)?;
    let values = prior_values(cfg);
    let correct_probs = cfg.correct_probs.clone().unwrap_or_else(|| CORRECT_PROBS.to_vec());
    let correct = finite_prior(&values, &correct_probs, "correct_probs")?;
    let truth: Vec<f64> = (0..c.paths as u64)
        .map(|i| values[correct.sample_index(&mut rng_from_seed(derive_seed(derive_seed(opts.seed, TRUTH_STREAM), i)))])
        .collect();

    let bip = FractionPolicy::bayesian(&c.incorrect, &c.market, &quad)?;
    let bcp = FractionPolicy::bayesian(&correct, &c.market, &quad)?;
    let mut policies = vec![&bip, &bcp];
    policies.extend(c.drbc.iter());
    let wealth = terminal_wealths(&c.market, &policies, c.paths, opts.seed, |i, _| truth[i as usize])?;

    let mut report = Report::new(NAME, opts.seed, params(&c, json!({ "correct_prior": correct })));
    let u_bip = summarize(&mut report, NAME, "bip", None, &wealth[0], &c.market)?;
    let u_bcp = summarize(&mut report, NAME, "bcp", None, &wealth[1], &c.market)?;
    let mut u_drbc = Vec::new();
    for (j, &delta) in c.deltas.iter().enumerate() {
        u_drbc.push(summarize(&mut report, NAME, "drbc", Some(delta), &wealth[2 + j], &c.market)?);
    }
    for (j, &delta) in c.deltas.iter().enumerate() {
        check_order(&mut report, &format!("bcp_above_drbc_delta_{delta}"), ("bcp", u_bcp), ("drbc", u_drbc[j]));
        check_order(&mut report, &format!("drbc_above_bip_delta_{delta}"), ("drbc", u_drbc[j]), ("bip", u_bip));
    }
    check_stability(&mut report, &c, &u_drbc);
    Ok(report)
}

pub(super) fn run_setting2(cfg: &Config, opts: RunOptions) -> Result<Report> {
    const NAME: &str = "setting2";
    let c = common(cfg, opts)?;
    let b = cfg.true_drift.unwrap_or(0.46);
    if !b.is_finite() {
        bail!("`true_drift` must be finite");
    }
    let bcpd = FractionPolicy::constant(c.market.merton_fraction(b));
    let drc: Vec<FractionPolicy> =
        c.deltas.iter().map(|&d| FractionPolicy::drc(&c.incorrect, &c.market, d)).collect::<Result<_, _>>()?;
    let mut policies = vec![&bcpd];
    policies.extend(drc.iter());
    policies.extend(c.drbc.iter());
    let wealth = terminal_wealths(&c.market, &policies, c.paths, opts.seed, |_, _| b)?;

    let mut report = Report::new(NAME, opts.seed, params(&c, json!({ "drift": b })));
    let u_bcpd = summarize(&mut report, NAME, "bcpd", None, &wealth[0], &c.market)?;
    let nd = c.deltas.len();
    let mut u_drbc = Vec::new();
    for (j, &delta) in c.deltas.iter().enumerate() {
        let u_drc = summarize(&mut report, NAME, "drc", Some(delta), &wealth[1 + j], &c.market)?;
        let u = summarize(&mut report, NAME, "drbc", Some(delta), &wealth[1 + nd + j], &c.market)?;
        check_order(&mut report, &format!("bcpd_above_drbc_delta_{delta}"), ("bcpd", u_bcpd), ("drbc", u));
        check_order(&mut report, &format!("drbc_above_drc_delta_{delta}"), ("drbc", u), ("drc", u_drc));
        u_drbc.push(u);
    }
    check_stability(&mut report, &c, &u_drbc);
    Ok(report)
}
