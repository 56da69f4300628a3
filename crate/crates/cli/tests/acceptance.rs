//! Acceptance gate: runs every exit criterion at its pinned tolerance and
//! prints one PASS/FAIL line each. Exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use anyhow::{ensure, Result};
use drbc_cli::{run_config, Config, Experiment, Overrides, Report};
use drbc_core::dual::{rmlmc_derivative, rmlmc_estimate_m, RmlmcBatch};
use drbc_core::merton::closed_form_utility_mc;
use drbc_core::{
    bayes_fraction, closed_form_conditional_utility, derive_seed, make_noise, riccati_solve, rng_from_seed,
    simulate_lq, ClosedFormParams, FinitePrior, InnerSimulator, LqBenchmark, LqModel, MertonMarket, Prior,
    QuadratureRule, RmlmcParams, TimeGrid,
};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<(bool, String)>;
type Check = (&'static str, fn() -> Outcome);

/// Inner samples `b + spread * s`, `s = ±1` equally likely.
struct TwoPoint {
    spread: f64,
}

impl InnerSimulator for TwoPoint {
    fn fill_samples(&self, b: &[f64], seed: u64, out: &mut [f64]) -> drbc_core::Result<()> {
        let mut rng = rng_from_seed(seed);
        for v in out.iter_mut() {
            *v = b[0] + if rng.random::<bool>() { self.spread } else { -self.spread };
        }
        Ok(())
    }
}

/// Inner samples `b + scale * N(0, 1)`.
struct Gaussian {
    scale: f64,
}

impl InnerSimulator for Gaussian {
    fn fill_samples(&self, b: &[f64], seed: u64, out: &mut [f64]) -> drbc_core::Result<()> {
        let mut rng = rng_from_seed(seed);
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = b[0] + self.scale * z;
        }
        Ok(())
    }
}

fn experiment(e: Experiment, cfg: &Config) -> Result<Report> {
    run_config(e, cfg, &Overrides::default())
}

fn properties(report: &Report, prefixes: &[&str]) -> (bool, String) {
    let picked: Vec<_> = report.properties.iter().filter(|p| prefixes.iter().any(|x| p.name.starts_with(x))).collect();
    let ok = !picked.is_empty() && picked.iter().all(|p| p.passed);
    let detail = picked
        .iter()
        .map(|p| format!("{}{}: {}", if p.passed { "" } else { "[x] " }, p.name, p.detail))
        .collect::<Vec<_>>()
        .join("; ");
    (ok, detail)
}

fn within(elapsed: Duration, limit_s: u64) -> (bool, String) {
    (elapsed.as_secs() <= limit_s, format!("{:.1}s of {limit_s}s budget", elapsed.as_secs_f64()))
}

fn duality_equivalence() -> Outcome {
    let start = Instant::now();
    let report = experiment(Experiment::DualityCheck, &Config::default())?;
    let (ok, detail) = properties(&report, &["kl_within", "cressie_read_within", "cressie_read_grid"]);
    let (fast, time) = within(start.elapsed(), 120);
    Ok((ok && fast, format!("{detail}; {time}")))
}

fn sqrt_n_rate() -> Outcome {
    let start = Instant::now();
    let cfg = Config { deltas: Some(vec![0.01]), ..Config::default() };
    let report = experiment(Experiment::RateTable, &cfg)?;
    let (ok, detail) = properties(&report, &["sqrt_n_rate", "means_stable"]);
    let (fast, time) = within(start.elapsed(), 1200);
    Ok((ok && fast, format!("{detail}; {time}")))
}

fn rmlmc_unbiased() -> Outcome {
    let start = Instant::now();
    let prior = FinitePrior::scalar(&[0.2, 1.0], &[0.4, 0.6])?;
    let wrapped = Prior::from(prior.clone());
    let sim = TwoPoint { spread: 1.5 };
    let n = 100_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, lambda) in [0.5, 1.0, 5.0].into_iter().enumerate() {
        let (m, var) = rmlmc_estimate_m(&sim, &wrapped, lambda, &RmlmcParams::default(), n, 300 + i as u64)?;
        let se = (var / n as f64).sqrt();
        // Z(b) = b exactly, so M = sum p_i exp(-b_i / lambda)
        let exact: f64 = prior.scalar_values().iter().zip(prior.probs()).map(|(b, p)| p * (-b / lambda).exp()).sum();
        let z = (m - exact).abs() / se;
        ok &= z < 4.0;
        parts.push(format!("lambda {lambda}: {z:.2} SE"));
    }
    let (fast, time) = within(start.elapsed(), 120);
    Ok((ok && fast, format!("{}; {time}", parts.join(", "))))
}

fn derivative_estimator() -> Outcome {
    let mut rng = rng_from_seed(404);
    let params = RmlmcParams::default();
    let n = 4000;
    let (mut worst, mut worst_abs): (f64, f64) = (0.0, 0.0);
    for inst in 0..20u64 {
        let atoms = rng.random_range(2..6);
        let values: Vec<f64> = (0..atoms).map(|_| rng.random_range(-1.0..1.0)).collect();
        let raw: Vec<f64> = (0..atoms).map(|_| rng.random::<f64>() + 0.1).collect();
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let prior = Prior::from(FinitePrior::scalar(&values, &probs)?);
        let sim = Gaussian { scale: rng.random_range(0.2..1.0) };
        let lambda = rng.random_range(0.5..3.0);
        let h = 1e-4;
        let seed = derive_seed(900, inst);
        let d = rmlmc_derivative(&sim, &prior, lambda, &params, n, seed)?;
        let (mp, _) = rmlmc_estimate_m(&sim, &prior, lambda + h, &params, n, seed)?;
        let (mm, _) = rmlmc_estimate_m(&sim, &prior, lambda - h, &params, n, seed)?;
        let fd = (mp - mm) / (2.0 * h);

        let batch = RmlmcBatch::draw(&sim, &prior, &params, n, seed)?;
        let se = |f: &dyn Fn(&drbc_core::dual::LevelMeans) -> f64| {
            let v: Vec<f64> = batch.level_means().iter().map(f).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ((v.len() - 1) * v.len()) as f64).sqrt()
        };
        let se_d = se(&|lm| lm.estimate(&params, |z| drbc_core::dual::derivative_transform(z, lambda)));
        let se_fd = se(&|lm| {
            (lm.estimate(&params, |z| (-z / (lambda + h)).exp()) - lm.estimate(&params, |z| (-z / (lambda - h)).exp()))
                / (2.0 * h)
        });
        worst = worst.max((d - fd).abs() / (se_d * se_d + se_fd * se_fd).sqrt());
        worst_abs = worst_abs.max((d - fd).abs());
    }
    Ok((
        worst <= 3.0,
        format!(
            "largest |derivative - finite difference| = {worst_abs:.2e} ({worst:.2e} combined SE) over 20 instances"
        ),
    ))
}

fn riccati_correctness() -> Outcome {
    let m = |v: f64| DMatrix::from_element(1, 1, v);
    let horizon = 2.0;
    let scalar =
        LqModel::new(m(0.0), vec![m(1.0)], m(1.0), m(1.0), m(1.0), m(0.0), m(1.0), TimeGrid::new(horizon, 200)?)?;
    let sol = riccati_solve(&scalar, &scalar.a0)?;
    let tanh_err =
        (0..=200).map(|k| (sol.p[k][(0, 0)] - (horizon - scalar.grid.time(k)).tanh()).abs()).fold(0.0, f64::max);

    let model =
        LqModel::benchmark(&LqBenchmark { d: 3, k: 2, m: 3, horizon: 1.0, steps: 400, ..LqBenchmark::default() })?;
    let theta = [0.3, -0.2, 0.1];
    let sol = riccati_solve(&model, &model.drift(&theta)?)?;
    let x0 = [1.0, -0.5, 0.25];
    let costs: Vec<f64> = (0..10_000u64)
        .map(|i| {
            Ok(simulate_lq(&model, &theta, &sol.policy, &make_noise(derive_seed(31, i), model.grid, 3), &x0)?
                .total_cost())
        })
        .collect::<Result<_>>()?;
    let n = costs.len() as f64;
    let mc = costs.iter().sum::<f64>() / n;
    let se = (costs.iter().map(|c| (c - mc).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let predicted = sol.expected_cost(&model, &x0);
    let z = (mc - predicted).abs() / se;
    Ok((
        tanh_err <= 1e-6 && z <= 3.0,
        format!("max |P - tanh(T - t)| = {tanh_err:.2e}; MC cost {mc:.4} vs {predicted:.4} ({z:.2} SE)"),
    ))
}

fn lq_ordering() -> Outcome {
    let start = Instant::now();
    let report = experiment(Experiment::LqCompare, &Config::default())?;
    let (ok, detail) = properties(&report, &["drbc_mean_gap_below_plugin", "drbc_gap_std_below_half_plugin"]);
    let (fast, time) = within(start.elapsed(), 1800);
    Ok((ok && fast, format!("{detail}; {time}")))
}

fn merton_closed_forms() -> Outcome {
    let quad = QuadratureRule::gauss_hermite(64);
    let market = MertonMarket::new(0.05, 0.4, 1.0, 1.0, 0.5, 100)?;
    let mut frac_err: f64 = 0.0;
    for b in [0.01, 0.1, 0.3, 0.46] {
        let prior = FinitePrior::point_mass(vec![b])?;
        for (t, y) in [(0.0, 0.0), (0.3, 1.2), (0.7, -2.0), (0.99, 3.5)] {
            frac_err = frac_err.max((bayes_fraction(t, y, &prior, &market, &quad)? - market.merton_fraction(b)).abs());
        }
    }
    let h1 = ClosedFormParams { gamma: 0.5, sigma0: 2.0, b0: 0.1, mu0: 0.1 };
    let sets = [
        (MertonMarket::new(0.05, 0.4, 1.0, 1.0, 0.5, 1)?, h1, 0.1),
        (MertonMarket::new(0.05, 0.4, 1.0, 1.0, 0.5, 1)?, h1, 0.3),
        (MertonMarket::new(0.1, 0.4, 1.0, 1.0, 0.5, 1)?, h1, 0.1),
        (
            MertonMarket::new(0.03, 0.3, 2.0, 1.5, 0.3, 1)?,
            ClosedFormParams { gamma: 0.4, sigma0: 0.5, b0: 0.08, mu0: 0.06 },
            0.12,
        ),
        (
            MertonMarket::new(0.02, 0.25, 0.5, 1.0, 0.4, 1)?,
            ClosedFormParams { gamma: 0.7, sigma0: 1.0, b0: 0.05, mu0: 0.1 },
            0.0,
        ),
    ];
    let mut worst: f64 = 0.0;
    for (i, (m, params, b)) in sets.iter().enumerate() {
        let exact = closed_form_conditional_utility(*b, m, params)?;
        let (mc, se) = closed_form_utility_mc(*b, m, params, 1_000_000, 170 + i as u64)?;
        worst = worst.max((exact - mc).abs() / se);
    }
    Ok((
        frac_err <= 1e-8 && worst < 4.0,
        format!("point-mass fraction error {frac_err:.2e}; closed form vs MC worst {worst:.2} SE over 5 sets"),
    ))
}

fn ablation_dominance() -> Outcome {
    let report = experiment(Experiment::GapVsDelta, &Config::default())?;
    Ok(properties(&report, &["drbc_gap_le_drc_gap", "gaps_nonnegative"]))
}

fn settings_ordering() -> Outcome {
    let one = experiment(Experiment::Setting1, &Config::default())?;
    let two = experiment(Experiment::Setting2, &Config::default())?;
    let (ok1, d1) = properties(&one, &["bcp_above_drbc", "drbc_above_bip", "drbc_stable_across_delta"]);
    let (ok2, d2) = properties(&two, &["bcpd_above_drbc", "drbc_above_drc", "drbc_stable_across_delta"]);
    Ok((ok1 && ok2, format!("setting 1: {d1}; setting 2: {d2}")))
}

fn small_configs() -> Vec<(Experiment, Config)> {
    vec![
        (Experiment::DualityCheck, Config { replications: Some(100), ..Config::default() }),
        (
            Experiment::RateTable,
            Config { replications: Some(4), n_grid: Some(vec![50, 200]), steps: Some(50), ..Config::default() },
        ),
        (
            Experiment::GapVsDelta,
            Config { replications: Some(200), steps: Some(50), deltas: Some(vec![0.05, 0.2]), ..Config::default() },
        ),
        (Experiment::Setting1, Config { replications: Some(50), steps: Some(50), ..Config::default() }),
        (Experiment::Setting2, Config { replications: Some(50), steps: Some(50), ..Config::default() }),
        (
            Experiment::LqCompare,
            Config {
                replications: Some(3),
                steps: Some(40),
                s_in: Some(6),
                n_theta: Some(4),
                b_traj: Some(4),
                eval_rollouts: Some(16),
                ..Config::default()
            },
        ),
    ]
}

fn determinism() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (e, cfg) in small_configs() {
        let mut outputs = Vec::new();
        for threads in [1, 4, 4] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
            outputs.push(pool.install(|| experiment(e, &cfg))?.csv_string()?);
        }
        ensure!(!outputs[0].is_empty(), "{e} wrote no CSV");
        let same = outputs.windows(2).all(|w| w[0] == w[1]);
        ok &= same;
        parts.push(format!("{e} {}", if same { "identical" } else { "DIFFERS" }));
    }
    Ok((ok, format!("1 vs 4 workers, rerun: {}", parts.join(", "))))
}

fn main() {
    let criteria: [Check; 10] = [
        ("duality equivalence", duality_equivalence),
        ("sqrt(n) rate of robust evaluation", sqrt_n_rate),
        ("rMLMC unbiasedness", rmlmc_unbiased),
        ("derivative estimator", derivative_estimator),
        ("Riccati correctness", riccati_correctness),
        ("LQ robustness ordering", lq_ordering),
        ("Merton closed forms", merton_closed_forms),
        ("ablation dominance", ablation_dominance),
        ("settings ordering", settings_ordering),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (passed, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !passed {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} {name} [{:.1}s]: {detail}",
            if passed { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
