//! Utility gap to the full-information policy under a time-varying drift,
//! for the robust (DRC) and robust Bayesian (DRBC) investors across radii.

use anyhow::{bail, Result};
use drbc_core::merton::cosine_drift;
use drbc_core::{drbc_finite_solve, FractionPolicy, LearnSchedule};
use rayon::prelude::*;
use serde_json::json;

use super::{finite_prior, market, prior_values, quadrature, terminal_wealths, RunOptions, BASE_PROBS};
use crate::config::{check_deltas, check_replications, Config};
use crate::report::{mean_std, std_err, Report, ReportRow};

const NAME: &str = "gap_vs_delta";

pub(super) fn run(cfg: &Config, opts: RunOptions) -> Result<Report> {
    let paths = cfg.replications.unwrap_or(if opts.full { 10_000 } else { 2000 });
    check_replications(paths, "market paths")?;
    if paths < 2 {
        bail!("`replications` must be at least 2 market paths to estimate a standard error");
    }
    let deltas = cfg.deltas.clone().unwrap_or_else(|| vec![0.02, 0.05, 0.1, 0.2, 0.4]);
    check_deltas(&deltas, true)?;
    let market = market(cfg, if opts.full { 1000 } else { 250 })?;
    let quad = quadrature(cfg)?;
    let values = prior_values(cfg);
    let probs = cfg.prior_probs.clone().unwrap_or_else(|| BASE_PROBS.to_vec());
    let prior = finite_prior(&values, &probs, "prior_probs")?;
    let b0 = cfg.b0.unwrap_or(0.6);
    let kappa = cfg.kappa.unwrap_or(std::f64::consts::FRAC_PI_2);
    if !b0.is_finite() || !kappa.is_finite() {
        bail!("`b0` and `kappa` must be finite");
    }
    let drift = cosine_drift(b0, kappa);

    let oracle = FractionPolicy::time_varying(market.grid, "merton fraction of the true drift", |t| {
        market.merton_fraction(drift(t))
    });
    let robust: Vec<(FractionPolicy, FractionPolicy)> = deltas
        .par_iter()
        .map(|&delta| {
            let drc = FractionPolicy::drc(&prior, &market, delta)?;
            let drbc = if delta == 0.0 {
                FractionPolicy::bayesian(&prior, &market, &quad)?
            } else {
                let sol = drbc_finite_solve(&prior, &market, delta, &LearnSchedule::default(), &quad)?;
                FractionPolicy::drbc(&sol.q, delta, sol.lambda, &market, &quad)?
            };
            Ok((drc, drbc))
        })
        .collect::<Result<_>>()?;

    let mut policies = vec![&oracle];
    for (drc, drbc) in &robust {
        policies.push(drc);
        policies.push(drbc);
    }
    let wealth = terminal_wealths(&market, &policies, paths, opts.seed, |_, t| drift(t))?;
    let utils: Vec<Vec<f64>> = wealth.iter().map(|w| w.iter().map(|&x| market.utility(x)).collect()).collect();
    let gaps = |j: usize| -> Vec<f64> { utils[0].iter().zip(&utils[j]).map(|(a, b)| a - b).collect() };

    let mut report = Report::new(
        NAME,
        opts.seed,
        json!({
            "paths": paths, "deltas": deltas, "b0": b0, "kappa": kappa, "market": market, "prior": prior,
            "policies": policies.iter().map(|p| p.snapshot()).collect::<Vec<_>>(),
        }),
    );
    report.push(ReportRow::from_values(NAME, "optimal", "utility", &utils[0]));
    report.push(ReportRow::from_values(NAME, "optimal", "gap", &gaps(0)));
    for (di, &delta) in deltas.iter().enumerate() {
        let (j_drc, j_drbc) = (1 + 2 * di, 2 + 2 * di);
        let (g_drc, g_drbc) = (gaps(j_drc), gaps(j_drbc));
        report.push(ReportRow::from_values(NAME, "drc", "utility", &utils[j_drc]).with_delta(delta));
        report.push(ReportRow::from_values(NAME, "drbc", "utility", &utils[j_drbc]).with_delta(delta));
        report.push(ReportRow::from_values(NAME, "drc", "gap", &g_drc).with_delta(delta));
        report.push(ReportRow::from_values(NAME, "drbc", "gap", &g_drbc).with_delta(delta));

        let (m_drc, m_drbc) = (mean_std(&g_drc).0, mean_std(&g_drbc).0);
        let (se_drc, se_drbc) = (std_err(&g_drc), std_err(&g_drbc));
        report.check(
            &format!("drbc_gap_le_drc_gap_delta_{delta}"),
            m_drbc <= m_drc,
            format!("drbc gap {m_drbc:.5} (se {se_drbc:.5}) vs drc gap {m_drc:.5} (se {se_drc:.5})"),
        );
        report.check(
            &format!("gaps_nonnegative_delta_{delta}"),
            m_drbc >= -3.0 * se_drbc && m_drc >= -3.0 * se_drc,
            format!("drbc {m_drbc:.5} >= {:.5}, drc {m_drc:.5} >= {:.5}", -3.0 * se_drbc, -3.0 * se_drc),
        );
    }
    Ok(report)
}
