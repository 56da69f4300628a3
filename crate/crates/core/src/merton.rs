//! Bayesian Merton portfolio machinery: posterior-mixture fractions and values
//! for finite priors, the constant-fraction robust baseline, finite-prior
//! distributionally robust learning, the Gaussian-prior closed form and
//! performance metrics.
//!
//! `nu = (b - r) / sigma` is the market price of risk of drift `b`, and
//! `L_t(b, y) = exp(nu y - nu^2 t / 2)` the likelihood of the observation
//! `Y_t = y` under drift `b` relative to a standard Brownian motion.

use crate::dual::{maximize_kl_dual, AscentConfig, ExactFiniteOracle, InnerSimulator};
use crate::error::{ensure, Error, Result};
use crate::priors::{kl_finite, tilt_worst_mean, FinitePrior, TiltSense};
use crate::quadrature::{log_sum_exp, QuadratureRule};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sde::{simulate_wealth_terminal, FractionRule, TimeGrid};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Market, horizon and preferences of the single-stock problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MertonMarket {
    pub r: f64,
    pub sigma: f64,
    pub x0: f64,
    /// Power-utility exponent, `u(x) = x^alpha / alpha`.
    pub alpha: f64,
    pub grid: TimeGrid,
}

impl MertonMarket {
    pub fn new(r: f64, sigma: f64, horizon: f64, x0: f64, alpha: f64, steps: usize) -> Result<Self> {
        ensure(r.is_finite(), || "risk-free rate must be finite".into())?;
        ensure(sigma.is_finite() && sigma > 0.0, || format!("volatility must be positive, got {sigma}"))?;
        ensure(x0.is_finite() && x0 > 0.0, || format!("initial wealth must be positive, got {x0}"))?;
        ensure(alpha > 0.0 && alpha < 1.0, || format!("utility exponent must lie in (0, 1), got {alpha}"))?;
        Ok(Self { r, sigma, x0, alpha, grid: TimeGrid::new(horizon, steps)? })
    }

    pub fn horizon(&self) -> f64 {
        self.grid.horizon()
    }

    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        Ok(Self { grid: TimeGrid::new(self.horizon(), steps)?, ..*self })
    }

    pub fn utility(&self, x: f64) -> f64 {
        x.max(0.0).powf(self.alpha) / self.alpha
    }

    pub fn price_of_risk(&self, b: f64) -> f64 {
        (b - self.r) / self.sigma
    }

    /// Classical Merton fraction for a known drift.
    pub fn merton_fraction(&self, b: f64) -> f64 {
        (b - self.r) / ((1.0 - self.alpha) * self.sigma * self.sigma)
    }

    /// `(x0 e^{rT})^alpha / alpha`, the utility of investing risk-free.
    fn riskless_utility(&self) -> f64 {
        self.utility(self.x0 * (self.r * self.horizon()).exp())
    }
}

/// Mixture likelihood in log form: `log F(t, y)` and `dF / F`.
#[derive(Debug, Clone)]
struct Mixture {
    log_w: Vec<f64>,
    nu: Vec<f64>,
}

impl Mixture {
    fn new(prior: &FinitePrior, market: &MertonMarket) -> Self {
        Self::from_weights(&prior.scalar_values(), prior.probs(), market)
    }

    /// Weights need not sum to one; zero weights drop out.
    fn from_weights(values: &[f64], weights: &[f64], market: &MertonMarket) -> Self {
        let (log_w, nu) = values
            .iter()
            .zip(weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&b, &w)| (w.ln(), market.price_of_risk(b)))
            .unzip();
        Self { log_w, nu }
    }

    /// `(log F, dF / F)` at `(t, y)`.
    fn eval(&self, t: f64, y: f64) -> (f64, f64) {
        let mut m = f64::NEG_INFINITY;
        for (lw, nu) in self.log_w.iter().zip(&self.nu) {
            m = m.max(lw + nu * y - 0.5 * nu * nu * t);
        }
        let (mut s, mut sd) = (0.0, 0.0);
        for (lw, nu) in self.log_w.iter().zip(&self.nu) {
            let e = (lw + nu * y - 0.5 * nu * nu * t - m).exp();
            s += e;
            sd += nu * e;
        }
        (m + s.ln(), sd / s)
    }

    fn log_f(&self, t: f64, y: f64) -> f64 {
        self.eval(t, y).0
    }
}

/// `F(t, y) = sum p_i L_t(b_i, y)` and `dF = sum p_i nu_i L_t(b_i, y)`.
pub fn f_mixture(t: f64, y: f64, prior: &FinitePrior, market: &MertonMarket) -> (f64, f64) {
    let (log_f, ratio) = Mixture::new(prior, market).eval(t, y);
    let f = log_f.exp();
    (f, ratio * f)
}

fn fraction_from_mixture(mix: &Mixture, t: f64, y: f64, market: &MertonMarket, quad: &QuadratureRule) -> Result<f64> {
    let horizon = market.horizon();
    let s = (horizon - t).max(0.0);
    let sd = s.sqrt();
    let k = 1.0 / (1.0 - market.alpha);
    // weights w_j F^{1/(1-alpha)}(T, y + z_j) in log space; numerator reuses them times dF/F
    let mut logs = Vec::with_capacity(quad.len());
    let mut ratios = Vec::with_capacity(quad.len());
    for (x, w) in quad.nodes().iter().zip(quad.weights()) {
        let (lf, ratio) = mix.eval(horizon, y + sd * x);
        logs.push(w.ln() + k * lf);
        ratios.push(ratio);
    }
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::QuadratureUnderflow);
    }
    let (mut den, mut num) = (0.0, 0.0);
    for (l, ratio) in logs.iter().zip(&ratios) {
        let e = (l - m).exp();
        den += e;
        num += e * ratio;
    }
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::QuadratureUnderflow);
    }
    Ok(num / den / ((1.0 - market.alpha) * market.sigma))
}

/// Optimal fraction of wealth in the stock for the Bayesian investor with
/// prior `prior`, given `Y_t = y`.
pub fn bayes_fraction(
    t: f64,
    y: f64,
    prior: &FinitePrior,
    market: &MertonMarket,
    quad: &QuadratureRule,
) -> Result<f64> {
    fraction_from_mixture(&Mixture::new(prior, market), t, y, market, quad)
}

fn log_power_integral(mix: &Mixture, market: &MertonMarket, quad: &QuadratureRule) -> Result<f64> {
    let horizon = market.horizon();
    let k = 1.0 / (1.0 - market.alpha);
    let log_i = quad.log_expect_exp(horizon, |z| k * mix.log_f(horizon, z));
    if !log_i.is_finite() {
        return Err(Error::QuadratureUnderflow);
    }
    Ok(log_i)
}

fn value_from_mixture(mix: &Mixture, market: &MertonMarket, quad: &QuadratureRule) -> Result<f64> {
    let log_i = log_power_integral(mix, market, quad)?;
    Ok(market.riskless_utility() * ((1.0 - market.alpha) * log_i).exp())
}

/// Optimal expected utility of the Bayesian investor,
/// `(x0 e^{rT})^alpha / alpha * (E[F(T, Z)^{1/(1-alpha)}])^{1-alpha}`, `Z ~ N(0, T)`.
pub fn bayes_value(prior: &FinitePrior, market: &MertonMarket, quad: &QuadratureRule) -> Result<f64> {
    value_from_mixture(&Mixture::new(prior, market), market, quad)
}

/// The same value for arbitrary non-negative weights on the atoms; it is
/// positively homogeneous of degree one in the weights.
pub fn bayes_value_weights(
    values: &[f64],
    weights: &[f64],
    market: &MertonMarket,
    quad: &QuadratureRule,
) -> Result<f64> {
    value_from_mixture(&Mixture::from_weights(values, weights, market), market, quad)
}

/// Expected utility, under drift `b`, of the continuous-time Bayes-optimal
/// strategy for prior `q`.
///
/// The optimal terminal wealth is `x0 e^{rT} F_q(T, Y_T)^{1/(1-alpha)} / I` with
/// `I = E[F_q(T, Z)^{1/(1-alpha)}]`, and `Y_T ~ N(nu_b T, T)` under drift `b`.
pub fn bayes_conditional_utility(q: &FinitePrior, b: f64, market: &MertonMarket, quad: &QuadratureRule) -> Result<f64> {
    let mix = Mixture::new(q, market);
    let log_i = log_power_integral(&mix, market, quad)?;
    let horizon = market.horizon();
    let shift = market.price_of_risk(b) * horizon;
    let ratio = market.alpha / (1.0 - market.alpha);
    let log_e = quad.log_expect_exp(horizon, |z| ratio * mix.log_f(horizon, z + shift));
    Ok(market.riskless_utility() * (log_e - market.alpha * log_i).exp())
}

/// Constant fraction of the robust (non-Bayesian) investor facing the
/// worst-case mean drift over the KL ball.
pub fn drc_fraction(prior: &FinitePrior, market: &MertonMarket, delta: f64) -> Result<f64> {
    let values = prior.scalar_values();
    let tilt = tilt_worst_mean(prior, &values, delta, TiltSense::Min)?;
    Ok(market.merton_fraction(tilt.worst_mean))
}

/// Multi-asset constant fractions `(1/(1-alpha)) Sigma^{-1} (mu_worst - r)`,
/// where `mu_worst` is the mean of the prior tilted against the total drift
/// `sum_k b_k` and `Sigma` is the return covariance.
pub fn drc_fraction_vector(
    prior: &FinitePrior,
    r: f64,
    alpha: f64,
    covariance: &DMatrix<f64>,
    delta: f64,
) -> Result<DVector<f64>> {
    let d = prior.dim();
    if covariance.nrows() != d || covariance.ncols() != d {
        return Err(Error::DimensionMismatch(format!("covariance must be {d} x {d}")));
    }
    let scores: Vec<f64> = prior.values().iter().map(|v| v.iter().sum()).collect();
    let tilt = tilt_worst_mean(prior, &scores, delta, TiltSense::Min)?;
    let mu = DVector::from_vec(tilt.q.mean());
    let excess = mu.add_scalar(-r);
    let chol = covariance.clone().cholesky().ok_or(Error::SingularInformation)?;
    Ok(chol.solve(&excess) / (1.0 - alpha))
}

/// Fraction schedule on a `(t, y)` grid with bilinear interpolation; `y`
/// outside the table is clamped to its edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionTable {
    dt: f64,
    nt: usize,
    y_min: f64,
    dy: f64,
    ny: usize,
    values: Vec<f64>,
}

impl FractionTable {
    pub const DEFAULT_Y_RANGE: (f64, f64) = (-8.0, 8.0);
    pub const DEFAULT_Y_POINTS: usize = 401;

    /// Tabulates `f` at every node of `grid` (including `T`) and `ny` points of `[y_min, y_max]`.
    pub fn tabulate<F>(grid: TimeGrid, y_min: f64, y_max: f64, ny: usize, f: F) -> Result<Self>
    where
        F: Fn(f64, f64) -> Result<f64> + Sync,
    {
        ensure(ny >= 2 && y_max > y_min, || "table needs at least two y points".into())?;
        let nt = grid.steps() + 1;
        let dy = (y_max - y_min) / (ny - 1) as f64;
        let rows: Vec<Vec<f64>> = (0..nt)
            .into_par_iter()
            .map(|k| (0..ny).map(|j| f(grid.time(k), y_min + j as f64 * dy)).collect::<Result<Vec<f64>>>())
            .collect::<Result<_>>()?;
        Ok(Self { dt: grid.dt(), nt, y_min, dy, ny, values: rows.concat() })
    }

    fn row_value(&self, k: usize, y: f64) -> f64 {
        let pos = ((y - self.y_min) / self.dy).clamp(0.0, (self.ny - 1) as f64);
        let j = (pos.floor() as usize).min(self.ny - 2);
        let w = pos - j as f64;
        let row = &self.values[k * self.ny..(k + 1) * self.ny];
        row[j] * (1.0 - w) + row[j + 1] * w
    }
}

impl FractionRule for FractionTable {
    fn fraction(&self, t: f64, y: f64) -> f64 {
        let pos = (t / self.dt).clamp(0.0, (self.nt - 1) as f64);
        let k = pos.floor() as usize;
        let w = pos - k as f64;
        if k + 1 >= self.nt || w < 1e-9 {
            return self.row_value(k.min(self.nt - 1), y);
        }
        self.row_value(k, y) * (1.0 - w) + self.row_value(k + 1, y) * w
    }
}

/// Where a fraction policy came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "snake_case")]
pub enum PolicyTag {
    Bayesian { prior: FinitePrior },
    Drc { delta: f64, fraction: f64 },
    Drbc { delta: f64, lambda: f64, q: FinitePrior },
    Constant { fraction: f64 },
    TimeVarying { description: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Rule {
    Constant(f64),
    Table(FractionTable),
    /// one value per grid step, independent of `y`
    Schedule {
        dt: f64,
        values: Vec<f64>,
    },
}

/// A fraction-of-wealth feedback rule with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionPolicy {
    pub tag: PolicyTag,
    rule: Rule,
}

impl FractionPolicy {
    pub fn constant(fraction: f64) -> Self {
        Self { tag: PolicyTag::Constant { fraction }, rule: Rule::Constant(fraction) }
    }

    pub fn drc(prior: &FinitePrior, market: &MertonMarket, delta: f64) -> Result<Self> {
        let fraction = drc_fraction(prior, market, delta)?;
        Ok(Self { tag: PolicyTag::Drc { delta, fraction }, rule: Rule::Constant(fraction) })
    }

    /// Bayes-optimal fractions for `prior`, tabulated on the market grid.
    pub fn bayesian(prior: &FinitePrior, market: &MertonMarket, quad: &QuadratureRule) -> Result<Self> {
        let table = bayes_table(prior, market, quad)?;
        Ok(Self { tag: PolicyTag::Bayesian { prior: prior.clone() }, rule: Rule::Table(table) })
    }

    /// Bayes-optimal fractions for the adversarial prior `q`.
    pub fn drbc(
        q: &FinitePrior,
        delta: f64,
        lambda: f64,
        market: &MertonMarket,
        quad: &QuadratureRule,
    ) -> Result<Self> {
        let table = bayes_table(q, market, quad)?;
        Ok(Self { tag: PolicyTag::Drbc { delta, lambda, q: q.clone() }, rule: Rule::Table(table) })
    }

    /// Deterministic schedule `f(t)` evaluated at the grid nodes.
    pub fn time_varying<F: Fn(f64) -> f64>(grid: TimeGrid, description: &str, f: F) -> Self {
        let values = (0..=grid.steps()).map(|k| f(grid.time(k))).collect();
        Self {
            tag: PolicyTag::TimeVarying { description: description.to_string() },
            rule: Rule::Schedule { dt: grid.dt(), values },
        }
    }

    /// `{"type": ..., "params": {...}}`
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(&self.tag).unwrap_or_else(|_| json!({"type": "unknown"}))
    }
}

impl FractionRule for FractionPolicy {
    fn fraction(&self, t: f64, y: f64) -> f64 {
        match &self.rule {
            Rule::Constant(c) => *c,
            Rule::Table(table) => table.fraction(t, y),
            Rule::Schedule { dt, values } => {
                let k = ((t / dt).round() as usize).min(values.len() - 1);
                values[k]
            }
        }
    }
}

fn bayes_table(prior: &FinitePrior, market: &MertonMarket, quad: &QuadratureRule) -> Result<FractionTable> {
    let mix = Mixture::new(prior, market);
    let (lo, hi) = FractionTable::DEFAULT_Y_RANGE;
    FractionTable::tabulate(market.grid, lo, hi, FractionTable::DEFAULT_Y_POINTS, |t, y| {
        fraction_from_mixture(&mix, t, y, market, quad)
    })
}

/// Inner sampler for robust evaluation: each sample is the utility of one
/// Euler path of `policy` under drift `b`.
pub struct UtilitySampler<'a, P: FractionRule + Sync> {
    pub market: &'a MertonMarket,
    pub policy: &'a P,
}

impl<P: FractionRule + Sync> InnerSimulator for UtilitySampler<'_, P> {
    fn fill_samples(&self, b: &[f64], seed: u64, out: &mut [f64]) -> Result<()> {
        for (j, slot) in out.iter_mut().enumerate() {
            let mut rng = rng_from_seed(derive_seed(seed, j as u64));
            let x = simulate_wealth_terminal(self.market, b[0], self.policy, &mut rng)?;
            *slot = self.market.utility(x);
        }
        Ok(())
    }

    fn lower_bound(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Step-size and stopping rule for [`drbc_finite_learn`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnSchedule {
    /// finite-difference half-width
    pub h: f64,
    /// initial mirror-descent step
    pub step0: f64,
    /// stop when the squared change of `q` falls below this
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for LearnSchedule {
    fn default() -> Self {
        Self { h: 1e-5, step0: 1.0, tol: 1e-16, max_iters: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrbcLearnResult {
    pub q: FinitePrior,
    /// `V(q) + lambda KL(q || p)` at the returned `q`
    pub penalized_value: f64,
    /// Bayes value under `q`
    pub value_q: f64,
    pub kl: f64,
    pub iterations: usize,
    pub converged: bool,
    /// penalized objective after each accepted step, starting from `q = p`
    pub history: Vec<f64>,
}

/// Central-difference gradient of the Bayes value in the prior weights.
pub fn bayes_value_gradient(
    values: &[f64],
    q: &[f64],
    h: f64,
    market: &MertonMarket,
    quad: &QuadratureRule,
) -> Result<Vec<f64>> {
    (0..q.len())
        .map(|i| {
            // keep the perturbed weights non-negative
            let hi = h.min(0.5 * q[i]).max(f64::MIN_POSITIVE);
            let mut up = q.to_vec();
            let mut down = q.to_vec();
            up[i] += hi;
            down[i] -= hi;
            let vu = bayes_value_weights(values, &up, market, quad)?;
            let vd = bayes_value_weights(values, &down, market, quad)?;
            Ok((vu - vd) / (2.0 * hi))
        })
        .collect()
}

fn penalized(
    values: &[f64],
    q: &[f64],
    p: &FinitePrior,
    lambda: f64,
    market: &MertonMarket,
    quad: &QuadratureRule,
) -> Result<f64> {
    let v = bayes_value_weights(values, q, market, quad)?;
    let kl = kl_finite(&p.with_probs(q.to_vec())?, p)?;
    Ok(v + lambda * kl)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

/// Minimizes `V(q) + lambda KL(q || p)` over the simplex on the atoms of `p`.
///
/// Each step forms `GF_i = dV/dq_i + lambda (log(q_i/p_i) + 1)` by central
/// differences and moves the log-weights: `q <- softmax(log q - step * GF)`. A
/// step that increases the objective is halved and retried, so the accepted
/// objective sequence is non-increasing.
pub fn drbc_finite_learn(
    prior: &FinitePrior,
    market: &MertonMarket,
    lambda: f64,
    schedule: &LearnSchedule,
    quad: &QuadratureRule,
) -> Result<DrbcLearnResult> {
    ensure(lambda > 0.0 && lambda.is_finite(), || format!("lambda must be positive, got {lambda}"))?;
    ensure(schedule.h > 0.0, || "finite-difference width must be positive".into())?;
    ensure(prior.probs().iter().all(|&p| p > 0.0), || "base prior must charge every atom".into())?;
    let values = prior.scalar_values();
    let p = prior.probs();
    let mut q = p.to_vec();
    let mut obj = penalized(&values, &q, prior, lambda, market, quad)?;
    let mut history = vec![obj];
    let mut step = schedule.step0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < schedule.max_iters {
        iterations += 1;
        let grad_v = bayes_value_gradient(&values, &q, schedule.h, market, quad)?;
        let gf: Vec<f64> =
            grad_v.iter().zip(&q).zip(p).map(|((g, qi), pi)| g + lambda * ((qi / pi).ln() + 1.0)).collect();
        let logq: Vec<f64> = q.iter().map(|v| v.ln()).collect();
        let mut accepted = None;
        for _ in 0..60 {
            let cand = softmax(&logq.iter().zip(&gf).map(|(l, g)| l - step * g).collect::<Vec<_>>());
            if cand.iter().any(|&v| v <= 0.0) {
                step *= 0.5;
                continue;
            }
            let cand_obj = penalized(&values, &cand, prior, lambda, market, quad)?;
            if cand_obj <= obj {
                accepted = Some((cand, cand_obj));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, cand_obj)) = accepted else {
            // no descent direction at working precision
            converged = true;
            break;
        };
        let change: f64 = cand.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum();
        q = cand;
        obj = cand_obj;
        history.push(obj);
        step = (step * 1.5).min(schedule.step0 * 1e3);
        if change < schedule.tol {
            converged = true;
            break;
        }
    }
    let q_prior = prior.with_probs(q.clone())?;
    let kl = kl_finite(&q_prior, prior)?;
    let value_q = bayes_value_weights(&values, &q, market, quad)?;
    Ok(DrbcLearnResult { q: q_prior, penalized_value: obj, value_q, kl, iterations, converged, history })
}

/// Outcome of alternating policy learning and robust evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DrbcSolution {
    pub q: FinitePrior,
    pub lambda: f64,
    /// worst-case expected utility of the learned policy over the KL ball
    pub robust_value: f64,
    pub rounds: usize,
    pub converged: bool,
}

/// Alternates [`drbc_finite_learn`] at fixed `lambda` with exact robust
/// evaluation of the resulting Bayes policy, which yields the next `lambda`.
pub fn drbc_finite_solve(
    prior: &FinitePrior,
    market: &MertonMarket,
    delta: f64,
    schedule: &LearnSchedule,
    quad: &QuadratureRule,
) -> Result<DrbcSolution> {
    ensure(delta > 0.0, || format!("radius must be positive, got {delta}"))?;
    let values = prior.scalar_values();
    let mut lambda = 0.33 / delta.sqrt();
    let mut q = prior.clone();
    let mut robust_value = f64::NAN;
    for round in 1..=30 {
        q = drbc_finite_learn(prior, market, lambda, schedule, quad)?.q;
        let z = values.iter().map(|&b| bayes_conditional_utility(&q, b, market, quad)).collect::<Result<Vec<f64>>>()?;
        let mut oracle = ExactFiniteOracle::new(prior.probs().to_vec(), z)?;
        let eval = maximize_kl_dual(&mut oracle, delta, &AscentConfig::default())?;
        robust_value = eval.robust_value;
        let change = (eval.lambda_star - lambda).abs();
        lambda = eval.lambda_star;
        if change < 1e-3 {
            return Ok(DrbcSolution { q, lambda, robust_value, rounds: round, converged: true });
        }
    }
    Ok(DrbcSolution { q, lambda, robust_value, rounds: 30, converged: false })
}

/// Parameters of the Gaussian-prior closed form with a power-type
/// transform of exponent `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormParams {
    pub gamma: f64,
    pub sigma0: f64,
    pub b0: f64,
    pub mu0: f64,
}

/// Coefficients of `alpha log X*_T = p D^2 / (2T) + q D + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedFormCoeffs {
    pub p: f64,
    pub q: f64,
    pub c: f64,
}

pub fn closed_form_coeffs(market: &MertonMarket, params: &ClosedFormParams) -> Result<ClosedFormCoeffs> {
    let ClosedFormParams { gamma, sigma0, b0, .. } = *params;
    ensure(gamma > 0.0 && gamma < 1.0, || format!("gamma must lie in (0, 1), got {gamma}"))?;
    ensure(sigma0 > 0.0, || format!("prior std must be positive, got {sigma0}"))?;
    let a = market.alpha;
    let s2 = sigma0 * sigma0;
    let disc = s2 * s2 + (2.0 - 4.0 * a) / (1.0 - a) * s2 + 1.0 / ((1.0 - a) * (1.0 - a)) - 4.0 * a / (1.0 - a) * gamma;
    if disc < 0.0 {
        return Err(Error::ComplexRoot(disc));
    }
    let p = (1.0 / (1.0 - a) + s2 - disc.sqrt()) / (2.0 * (s2 + gamma));
    let nu = (b0 - market.r) / market.sigma;
    let q = a * (1.0 - p) / ((1.0 - a) * (1.0 - gamma * p)) * nu;
    let horizon = market.horizon();
    let c =
        a * (market.x0.ln() + market.r * horizon + (nu * nu - (nu - q / a).powi(2) / (1.0 - p / a)) * horizon / 2.0);
    Ok(ClosedFormCoeffs { p, q, c })
}

/// `D = w_T + (b - b0) T / sigma`, the observation in excess of the `b0` drift.
fn closed_form_d(w_t: f64, b: f64, market: &MertonMarket, params: &ClosedFormParams) -> f64 {
    w_t + (b - params.b0) * market.horizon() / market.sigma
}

pub fn closed_form_terminal_wealth(w_t: f64, b: f64, market: &MertonMarket, params: &ClosedFormParams) -> Result<f64> {
    let ClosedFormCoeffs { p, q, c } = closed_form_coeffs(market, params)?;
    let d = closed_form_d(w_t, b, market, params);
    Ok(((p / (2.0 * market.horizon()) * d * d + q * d + c) / market.alpha).exp())
}

/// `E^{Q^b}[u(X*_T)]` in closed form.
pub fn closed_form_conditional_utility(b: f64, market: &MertonMarket, params: &ClosedFormParams) -> Result<f64> {
    let ClosedFormCoeffs { p, q, c } = closed_form_coeffs(market, params)?;
    if p >= 1.0 {
        return Err(Error::InvalidP(p));
    }
    let horizon = market.horizon();
    let nu_b = (params.b0 - b) / market.sigma;
    let expo = p * horizon / (2.0 * (1.0 - p)) * nu_b * nu_b - q * horizon / (1.0 - p) * nu_b
        + q * q * horizon / (2.0 * (1.0 - p))
        + c;
    Ok(expo.exp() / (market.alpha * (1.0 - p).sqrt()))
}

/// Monte Carlo estimate `(mean, standard error)` of `E^{Q^b}[u(X*_T)]`, drawing
/// `B ~ N(mu0, sigma0^2)`, `N ~ N(0, T)` and `W_T = N - (B - b) T / sigma`.
pub fn closed_form_utility_mc(
    b: f64,
    market: &MertonMarket,
    params: &ClosedFormParams,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    ensure(n >= 2, || "need at least two draws".into())?;
    let horizon = market.horizon();
    let mut rng = rng_from_seed(seed);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let zn: f64 = StandardNormal.sample(&mut rng);
        let zb: f64 = StandardNormal.sample(&mut rng);
        let big_b = params.mu0 + params.sigma0 * zb;
        let w_t = horizon.sqrt() * zn - (big_b - b) * horizon / market.sigma;
        let u = market.utility(closed_form_terminal_wealth(w_t, big_b, market, params)?);
        s += u;
        s2 += u * u;
    }
    let nf = n as f64;
    let mean = s / nf;
    let var = (s2 - nf * mean * mean) / (nf - 1.0);
    Ok((mean, (var.max(0.0) / nf).sqrt()))
}

/// Summary statistics of a batch of terminal wealths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub sharpe: f64,
    pub mean_utility: f64,
    pub utility_se: f64,
    pub mean_terminal: f64,
}

/// Sharpe ratio of terminal gross returns in excess of `e^{rT}`, and mean utility.
pub fn sharpe_and_utility(terminals: &[f64], market: &MertonMarket) -> Result<Performance> {
    ensure(terminals.len() >= 2, || "need at least two terminal wealths".into())?;
    let n = terminals.len() as f64;
    let gross: Vec<f64> = terminals.iter().map(|x| x / market.x0).collect();
    let mean_g = gross.iter().sum::<f64>() / n;
    let var_g = gross.iter().map(|g| (g - mean_g).powi(2)).sum::<f64>() / (n - 1.0);
    if var_g <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let sharpe = (mean_g - (market.r * market.horizon()).exp()) / var_g.sqrt();
    let utils: Vec<f64> = terminals.iter().map(|&x| market.utility(x)).collect();
    let mean_utility = utils.iter().sum::<f64>() / n;
    let var_u = utils.iter().map(|u| (u - mean_utility).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(Performance { sharpe, mean_utility, utility_se: (var_u / n).sqrt(), mean_terminal: mean_g * market.x0 })
}

/// `B_t = (b0 / 2)(1 + cos(kappa t))`.
pub fn cosine_drift(b0: f64, kappa: f64) -> impl Fn(f64) -> f64 + Copy {
    move |t| 0.5 * b0 * (1.0 + (kappa * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn market() -> MertonMarket {
        MertonMarket::new(0.05, 0.4, 1.0, 1.0, 0.5, 100).unwrap()
    }

    #[test]
    fn mixture_basics() {
        let m = market();
        let prior = FinitePrior::scalar(&[0.1, 0.3], &[0.4, 0.6]).unwrap();
        let (f, df) = f_mixture(0.0, 0.0, &prior, &m);
        assert!((f - 1.0).abs() < 1e-15);
        assert!((df - (0.4 * 0.125 + 0.6 * 0.625)).abs() < 1e-15);
        let flat = FinitePrior::scalar(&[0.05], &[1.0]).unwrap();
        let (f, df) = f_mixture(0.6, -2.0, &flat, &m);
        assert_eq!((f, df), (1.0, 0.0));
    }

    #[test]
    fn point_mass_fraction_is_merton() {
        let m = market();
        let quad = QuadratureRule::default();
        let prior = FinitePrior::scalar(&[0.1], &[1.0]).unwrap();
        for (t, y) in [(0.0, 0.0), (0.5, 3.0), (0.99, -4.0)] {
            let f = bayes_fraction(t, y, &prior, &m, &quad).unwrap();
            assert!((f - 0.625).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_prior_gives_zero_fraction() {
        let m = market();
        let quad = QuadratureRule::default();
        let prior = FinitePrior::scalar(&[0.05 - 0.2, 0.05 + 0.2], &[0.5, 0.5]).unwrap();
        for t in [0.0, 0.3, 0.9] {
            assert!(bayes_fraction(t, 0.0, &prior, &m, &quad).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn riskless_prior_value() {
        let m = market();
        let prior = FinitePrior::scalar(&[0.05], &[1.0]).unwrap();
        let v = bayes_value(&prior, &m, &QuadratureRule::default()).unwrap();
        assert!((v - 2.0 * (0.05f64).exp().sqrt()).abs() < 1e-12);
    }

    #[test]
    fn point_mass_value_is_merton_value() {
        // known drift: V = (x0 e^{rT})^a / a * exp(a nu^2 T / (2 (1 - a)))
        let m = market();
        let prior = FinitePrior::scalar(&[0.3], &[1.0]).unwrap();
        let v = bayes_value(&prior, &m, &QuadratureRule::default()).unwrap();
        let nu: f64 = 0.25 / 0.4;
        let expected = 2.0 * 0.05f64.exp().sqrt() * (0.5 * nu * nu / (2.0 * 0.5)).exp();
        assert!((v - expected).abs() < 1e-10);
        let cu = bayes_conditional_utility(&prior, 0.3, &m, &QuadratureRule::default()).unwrap();
        assert!((cu - expected).abs() < 1e-10);
    }

    #[test]
    fn conditional_utilities_average_to_value() {
        let m = market();
        let quad = QuadratureRule::default();
        let prior = FinitePrior::scalar(&[0.01, 0.2, 0.46], &[0.3, 0.3, 0.4]).unwrap();
        let v = bayes_value(&prior, &m, &quad).unwrap();
        let avg: f64 = prior
            .scalar_values()
            .iter()
            .zip(prior.probs())
            .map(|(&b, p)| p * bayes_conditional_utility(&prior, b, &m, &quad).unwrap())
            .sum();
        assert!((v - avg).abs() < 1e-10);
    }

    #[test]
    fn value_is_homogeneous_in_weights() {
        let m = market();
        let quad = QuadratureRule::default();
        let vals = [0.01, 0.3];
        let v1 = bayes_value_weights(&vals, &[0.4, 0.6], &m, &quad).unwrap();
        let v3 = bayes_value_weights(&vals, &[1.2, 1.8], &m, &quad).unwrap();
        assert!((v3 - 3.0 * v1).abs() < 1e-10);
    }

    #[test]
    fn drc_limits() {
        let m = market();
        let prior = FinitePrior::scalar(&[0.01, 0.46, 0.3], &[0.2, 0.5, 0.3]).unwrap();
        let f0 = drc_fraction(&prior, &m, 0.0).unwrap();
        assert!((f0 - m.merton_fraction(prior.mean()[0])).abs() < 1e-14);
        let fs = drc_fraction(&prior, &m, 10.0).unwrap();
        assert!((fs - m.merton_fraction(0.01)).abs() < 1e-14);
        assert!(fs < 0.0);
    }

    #[test]
    fn drc_vector_reduces_to_scalar() {
        let prior = FinitePrior::scalar(&[0.1, 0.3], &[0.5, 0.5]).unwrap();
        let m = market();
        let cov = DMatrix::from_element(1, 1, 0.16);
        let v = drc_fraction_vector(&prior, 0.05, 0.5, &cov, 0.05).unwrap();
        assert!((v[0] - drc_fraction(&prior, &m, 0.05).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn closed_form_reduction_at_b0() {
        let m = market();
        let params = ClosedFormParams { gamma: 0.5, sigma0: 2.0, b0: 0.1, mu0: 0.1 };
        let ClosedFormCoeffs { p, q, c } = closed_form_coeffs(&m, &params).unwrap();
        let u = closed_form_conditional_utility(0.1, &m, &params).unwrap();
        let expected = (q * q / (2.0 * (1.0 - p)) + c).exp() / (0.5 * (1.0 - p).sqrt());
        assert!((u - expected).abs() < 1e-14);
        let x = closed_form_terminal_wealth(0.0, 0.1, &m, &params).unwrap();
        assert!((x - (c / 0.5).exp()).abs() < 1e-14);
    }

    #[test]
    fn sharpe_and_utility_edge_cases() {
        let m = market();
        let flat = vec![0.05f64.exp(); 5];
        assert_eq!(sharpe_and_utility(&flat, &m), Err(Error::ZeroVariance));
        let perf = sharpe_and_utility(&[4.0, 4.0, 4.0 + 1e-300], &m);
        // variance underflows to zero in double precision
        assert!(perf.is_err() || (perf.unwrap().mean_utility - 4.0).abs() < 1e-12);
        let perf = sharpe_and_utility(&[1.0, 2.0], &m).unwrap();
        assert!((perf.mean_utility - (2.0 + 2.0 * 2f64.sqrt()) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn table_reproduces_constant_and_linear() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let t = FractionTable::tabulate(grid, -2.0, 2.0, 41, |t, y| Ok(0.3 + t - 0.5 * y)).unwrap();
        for (tt, y) in [(0.0f64, 0.0f64), (0.3, 1.234), (0.55, -0.77), (1.0, 5.0)] {
            let yc = y.clamp(-2.0, 2.0);
            assert!((t.fraction(tt, y) - (0.3 + tt - 0.5 * yc)).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_snapshot_shape() {
        let p = FractionPolicy::constant(0.4);
        let v = p.snapshot();
        assert_eq!(v["type"], "constant");
        assert_eq!(v["params"]["fraction"], 0.4);
    }
}
