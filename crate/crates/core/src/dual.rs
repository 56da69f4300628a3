//! Robust policy evaluation through the strong dual of the KL-ball problem,
//!
//! `R_delta = sup_{lambda > 0} -lambda delta - lambda log M(lambda)`,
//! `M(lambda) = E_{b ~ mu}[exp(-Z(b) / lambda)]`,
//!
//! with `M` estimated by randomized multilevel Monte Carlo when `Z(b)` is itself
//! an expectation, plus the Cressie–Read dual on weighted samples.

use crate::error::{ensure, Error, Result};
use crate::priors::Prior;
use crate::quadrature::log_sum_exp;
use crate::rng::{derive_seed, rng_from_seed};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// `-lambda delta - lambda log m`.
pub fn kl_dual_objective(m_value: f64, lambda: f64, delta: f64) -> Result<f64> {
    if m_value <= 0.0 || m_value.is_nan() {
        return Err(Error::NonPositiveM(m_value));
    }
    Ok(-lambda * delta - lambda * m_value.ln())
}

/// Any maximizer of the KL dual satisfies `lambda* <= (E Z - ess inf Z) / delta`.
pub fn lambda_upper_bound(mean_z: f64, ess_inf: f64, delta: f64) -> f64 {
    ((mean_z - ess_inf) / delta).max(0.0)
}

fn lambda_floor(mean_z: f64) -> f64 {
    1e-6 * mean_z.abs().max(1.0)
}

/// Level law `N = n0 + J`, `P(J = j) = R (1 - R)^j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmlmcParams {
    ratio: f64,
    n0: u32,
}

impl RmlmcParams {
    /// Levels above `n0 + MAX_EXTRA_LEVELS` are never drawn; the truncated mass
    /// is below `(1 - R)^21 < 1e-6`.
    pub const MAX_EXTRA_LEVELS: u32 = 20;
    pub const DEFAULT_RATIO: f64 = 0.65;
    pub const DEFAULT_N0: u32 = 3;

    pub fn new(ratio: f64, n0: u32) -> Result<Self> {
        ensure(ratio > 0.5 && ratio < 0.75, || format!("geometric ratio must lie in (1/2, 3/4), got {ratio}"))?;
        Ok(Self { ratio, n0 })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn n0(&self) -> u32 {
        self.n0
    }

    /// Probability of level `n`.
    pub fn pmf(&self, level: u32) -> f64 {
        if level < self.n0 {
            return 0.0;
        }
        self.ratio * (1.0 - self.ratio).powi((level - self.n0) as i32)
    }

    pub fn sample_level<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let u: f64 = 1.0 - rng.random::<f64>();
        let j = (u.ln() / (1.0 - self.ratio).ln()).floor();
        self.n0 + (j as u32).min(Self::MAX_EXTRA_LEVELS)
    }
}

impl Default for RmlmcParams {
    fn default() -> Self {
        Self { ratio: Self::DEFAULT_RATIO, n0: Self::DEFAULT_N0 }
    }
}

/// Produces unbiased samples of a conditional value `Z(b)`.
pub trait InnerSimulator: Sync {
    /// Fills `out` with i.i.d. samples for parameter `b`, deterministic in `seed`.
    fn fill_samples(&self, b: &[f64], seed: u64, out: &mut [f64]) -> Result<()>;

    /// `Z(b)` when it is known exactly; short-circuits the multilevel sampling.
    fn exact_value(&self, _b: &[f64]) -> Option<f64> {
        None
    }

    fn lower_bound(&self) -> Option<f64> {
        None
    }
}

impl<S: InnerSimulator + ?Sized> InnerSimulator for &S {
    fn fill_samples(&self, b: &[f64], seed: u64, out: &mut [f64]) -> Result<()> {
        (**self).fill_samples(b, seed, out)
    }

    fn exact_value(&self, b: &[f64]) -> Option<f64> {
        (**self).exact_value(b)
    }

    fn lower_bound(&self) -> Option<f64> {
        (**self).lower_bound()
    }
}

/// Deterministic inner values `Z(b) = f(b)`.
pub struct ExactInner<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> InnerSimulator for ExactInner<F> {
    fn fill_samples(&self, b: &[f64], _seed: u64, out: &mut [f64]) -> Result<()> {
        out.fill((self.0)(b));
        Ok(())
    }

    fn exact_value(&self, b: &[f64]) -> Option<f64> {
        Some((self.0)(b))
    }
}

/// Sample means entering one single-sample multilevel estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelMeans {
    pub level: u32,
    /// mean of the first `2^{n0}` samples
    pub base: f64,
    /// mean of the odd-indexed samples (1st, 3rd, ...)
    pub odd: f64,
    /// mean of the even-indexed samples
    pub even: f64,
}

impl LevelMeans {
    pub fn full(&self) -> f64 {
        0.5 * (self.odd + self.even)
    }

    /// `f(base) + Delta_N / p(N)` with `Delta_N = f(full) - (f(odd) + f(even)) / 2`.
    pub fn estimate<F: Fn(f64) -> f64>(&self, params: &RmlmcParams, f: F) -> f64 {
        let delta = f(self.full()) - 0.5 * (f(self.odd) + f(self.even));
        if delta == 0.0 {
            return f(self.base);
        }
        f(self.base) + delta / params.pmf(self.level)
    }

    fn min(&self) -> f64 {
        self.base.min(self.odd).min(self.even).min(self.full())
    }
}

/// Draws a level and `2^{N+1}` inner samples for parameter `b`.
pub fn level_means<S: InnerSimulator + ?Sized>(
    sim: &S,
    b: &[f64],
    params: &RmlmcParams,
    seed: u64,
) -> Result<LevelMeans> {
    let mut rng = rng_from_seed(seed);
    let level = params.sample_level(&mut rng);
    if let Some(z) = sim.exact_value(b) {
        return Ok(LevelMeans { level, base: z, odd: z, even: z });
    }
    let half = 1usize << level;
    let mut buf = vec![0.0; 2 * half];
    sim.fill_samples(b, derive_seed(seed, 1), &mut buf)?;
    let n_base = 1usize << params.n0();
    let base = buf[..n_base].iter().sum::<f64>() / n_base as f64;
    let odd = buf.iter().step_by(2).sum::<f64>() / half as f64;
    let even = buf.iter().skip(1).step_by(2).sum::<f64>() / half as f64;
    if !(base.is_finite() && odd.is_finite() && even.is_finite()) {
        return Err(Error::NonFinitePath { step: 0 });
    }
    Ok(LevelMeans { level, base, odd, even })
}

/// Single-sample estimator of `exp(-Z(b) / lambda)`.
pub fn rmlmc_single<S: InnerSimulator + ?Sized>(
    sim: &S,
    b: &[f64],
    lambda: f64,
    params: &RmlmcParams,
    seed: u64,
) -> Result<f64> {
    ensure(lambda > 0.0, || format!("lambda must be positive, got {lambda}"))?;
    Ok(level_means(sim, b, params, seed)?.estimate(params, |z| (-z / lambda).exp()))
}

/// `A_lambda(x) = (x / lambda^2) exp(-x / lambda) = d/dlambda exp(-x / lambda)`.
pub fn derivative_transform(x: f64, lambda: f64) -> f64 {
    x / (lambda * lambda) * (-x / lambda).exp()
}

/// One outer draw per index: `b ~ prior` and its level means.
#[derive(Debug, Clone, PartialEq)]
pub struct RmlmcBatch {
    params: RmlmcParams,
    means: Vec<LevelMeans>,
}

/// Transform moments of a batch at one `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualPoint {
    pub log_m: f64,
    /// `M'(lambda) / M(lambda)`
    pub d1: f64,
    /// `M''(lambda) / M(lambda)`
    pub d2: f64,
    /// sample variance of the `exp(-Z/lambda)` estimates divided by `M^2`
    pub rel_var: f64,
    pub n: usize,
}

impl DualPoint {
    pub fn objective(&self, lambda: f64, delta: f64) -> f64 {
        -lambda * delta - lambda * self.log_m
    }

    /// `d/dlambda` of the dual objective.
    pub fn gradient(&self, lambda: f64, delta: f64) -> f64 {
        -delta - self.log_m - lambda * self.d1
    }

    /// Second derivative of the dual objective.
    pub fn curvature(&self, lambda: f64) -> f64 {
        -2.0 * self.d1 - lambda * (self.d2 - self.d1 * self.d1)
    }

    pub fn std_err(&self, lambda: f64) -> f64 {
        lambda * (self.rel_var.max(0.0) / self.n as f64).sqrt()
    }
}

impl RmlmcBatch {
    pub fn draw<S: InnerSimulator + ?Sized>(
        sim: &S,
        prior: &Prior,
        params: &RmlmcParams,
        n_outer: usize,
        seed: u64,
    ) -> Result<Self> {
        ensure(n_outer >= 2, || format!("need at least two outer samples, got {n_outer}"))?;
        let means = (0..n_outer as u64)
            .into_par_iter()
            .map(|i| {
                let s = derive_seed(seed, i);
                let mut rng = rng_from_seed(s);
                let b = prior.sample(&mut rng);
                level_means(sim, &b, params, derive_seed(s, 0xB0B))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params: *params, means })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn level_means(&self) -> &[LevelMeans] {
        &self.means
    }

    /// Multilevel estimates of `Z(b_i)`, i.e. the identity transform.
    pub fn z_estimates(&self) -> Vec<f64> {
        self.means.iter().map(|m| m.estimate(&self.params, |z| z)).collect()
    }

    fn estimates<F: Fn(f64) -> f64>(&self, f: F) -> Vec<f64> {
        self.means.iter().map(|m| m.estimate(&self.params, &f)).collect()
    }

    /// Sample mean and variance of the `exp(-Z/lambda)` estimates.
    pub fn m_hat(&self, lambda: f64) -> (f64, f64) {
        mean_var(&self.estimates(|z| (-z / lambda).exp()))
    }

    /// Mean of the derivative-transform estimates, estimating `M'(lambda)`.
    pub fn derivative(&self, lambda: f64) -> f64 {
        mean_var(&self.estimates(|z| derivative_transform(z, lambda))).0
    }

    /// Moments with every transform computed relative to the smallest sample
    /// mean of the batch so that `exp` cannot overflow.
    pub fn point(&self, lambda: f64) -> Result<DualPoint> {
        let c = self.means.iter().map(LevelMeans::min).fold(f64::INFINITY, f64::min);
        let e = |z: f64| (-(z - c) / lambda).exp();
        let phi = self.estimates(e);
        let a = self.estimates(|z| z / (lambda * lambda) * e(z));
        let h = self.estimates(|z| e(z) * (z * z / lambda.powi(4) - 2.0 * z / lambda.powi(3)));
        let (m, var) = mean_var(&phi);
        if m <= 0.0 || !m.is_finite() {
            return Err(Error::NonPositiveM(m));
        }
        let n = phi.len();
        let am = a.iter().sum::<f64>() / n as f64;
        let hm = h.iter().sum::<f64>() / n as f64;
        Ok(DualPoint { log_m: m.ln() - c / lambda, d1: am / m, d2: hm / m, rel_var: var / (m * m), n })
    }

    /// Mean, minimum and variance of the multilevel `Z` estimates.
    fn z_summary(&self) -> (f64, f64, f64) {
        let z = self.z_estimates();
        let (mean, var) = mean_var(&z);
        let min = z.iter().copied().fold(f64::INFINITY, f64::min);
        (mean, min, var)
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    if v.iter().all(|x| *x == v[0]) {
        return (v[0], 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Sample mean and variance of `n_outer` single-sample estimates of `M(lambda)`.
pub fn rmlmc_estimate_m<S: InnerSimulator + ?Sized>(
    sim: &S,
    prior: &Prior,
    lambda: f64,
    params: &RmlmcParams,
    n_outer: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    ensure(lambda > 0.0, || format!("lambda must be positive, got {lambda}"))?;
    Ok(RmlmcBatch::draw(sim, prior, params, n_outer, seed)?.m_hat(lambda))
}

/// Estimate of `M'(lambda)` on the same outer draws and levels as
/// [`rmlmc_estimate_m`] with the same seed.
pub fn rmlmc_derivative<S: InnerSimulator + ?Sized>(
    sim: &S,
    prior: &Prior,
    lambda: f64,
    params: &RmlmcParams,
    n_outer: usize,
    seed: u64,
) -> Result<f64> {
    ensure(lambda > 0.0, || format!("lambda must be positive, got {lambda}"))?;
    Ok(RmlmcBatch::draw(sim, prior, params, n_outer, seed)?.derivative(lambda))
}

/// Source of dual-objective evaluations for the ascent loop.
pub trait DualOracle {
    /// Transform moments at `lambda` for ascent iteration `iteration`.
    fn evaluate(&mut self, lambda: f64, iteration: usize) -> Result<DualPoint>;

    /// `(mean Z, ess inf Z, Var Z)`, exact or estimated.
    fn support(&mut self) -> Result<(f64, f64, f64)>;
}

/// Exact oracle for a finite prior with known conditional values.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactFiniteOracle {
    probs: Vec<f64>,
    z: Vec<f64>,
}

impl ExactFiniteOracle {
    pub fn new(probs: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        if probs.len() != z.len() || probs.is_empty() {
            return Err(Error::DimensionMismatch(format!("{} probabilities for {} values", probs.len(), z.len())));
        }
        ensure(z.iter().all(|v| v.is_finite()), || "values must be finite".into())?;
        ensure(probs.iter().all(|p| *p >= 0.0) && probs.iter().any(|p| *p > 0.0), || {
            "probabilities must be non-negative and not all zero".into()
        })?;
        let total: f64 = probs.iter().sum();
        Ok(Self { probs: probs.iter().map(|p| p / total).collect(), z })
    }

    /// `log M(lambda)` by log-sum-exp.
    pub fn log_m(&self, lambda: f64) -> f64 {
        self.tilt(lambda).0
    }

    /// `(log M, tilted weights q_i ∝ p_i exp(-z_i / lambda))`.
    fn tilt(&self, lambda: f64) -> (f64, Vec<f64>) {
        let logs: Vec<f64> = self
            .probs
            .iter()
            .zip(&self.z)
            .map(|(p, z)| if *p > 0.0 { p.ln() - z / lambda } else { f64::NEG_INFINITY })
            .collect();
        let log_m = log_sum_exp(&logs);
        (log_m, logs.iter().map(|l| (l - log_m).exp()).collect())
    }

    pub fn objective(&self, lambda: f64, delta: f64) -> f64 {
        -lambda * delta - lambda * self.log_m(lambda)
    }
}

impl DualOracle for ExactFiniteOracle {
    fn evaluate(&mut self, lambda: f64, _iteration: usize) -> Result<DualPoint> {
        let (log_m, q) = self.tilt(lambda);
        let m1: f64 = q.iter().zip(&self.z).map(|(q, z)| q * z).sum();
        let m2: f64 = q.iter().zip(&self.z).map(|(q, z)| q * z * z).sum();
        let l2 = lambda * lambda;
        Ok(DualPoint { log_m, d1: m1 / l2, d2: m2 / (l2 * l2) - 2.0 * m1 / (l2 * lambda), rel_var: 0.0, n: usize::MAX })
    }

    fn support(&mut self) -> Result<(f64, f64, f64)> {
        let mean: f64 = self.probs.iter().zip(&self.z).map(|(p, z)| p * z).sum();
        let var: f64 = self.probs.iter().zip(&self.z).map(|(p, z)| p * (z - mean).powi(2)).sum();
        let inf =
            self.probs.iter().zip(&self.z).filter(|(p, _)| **p > 0.0).map(|(_, z)| *z).fold(f64::INFINITY, f64::min);
        Ok((mean, inf, var))
    }
}

/// Whether each ascent iteration sees new outer samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    #[default]
    Fresh,
    Fixed,
}

/// Multilevel oracle over a prior and an inner simulator.
pub struct RmlmcOracle<'a, S: InnerSimulator + ?Sized> {
    sim: &'a S,
    prior: &'a Prior,
    params: RmlmcParams,
    n_outer: usize,
    seed: u64,
    mode: BatchMode,
    fixed: Option<RmlmcBatch>,
}

impl<'a, S: InnerSimulator + ?Sized> RmlmcOracle<'a, S> {
    pub fn new(sim: &'a S, prior: &'a Prior, params: RmlmcParams, n_outer: usize, seed: u64, mode: BatchMode) -> Self {
        Self { sim, prior, params, n_outer, seed, mode, fixed: None }
    }

    fn fixed_batch(&mut self) -> Result<&RmlmcBatch> {
        if self.fixed.is_none() {
            self.fixed = Some(RmlmcBatch::draw(self.sim, self.prior, &self.params, self.n_outer, self.seed)?);
        }
        Ok(self.fixed.as_ref().expect("just drawn"))
    }

    fn batch_point(&self, lambda: f64, seed: u64, n: usize) -> Result<DualPoint> {
        RmlmcBatch::draw(self.sim, self.prior, &self.params, n, seed)?.point(lambda)
    }
}

impl<S: InnerSimulator + ?Sized> DualOracle for RmlmcOracle<'_, S> {
    fn evaluate(&mut self, lambda: f64, iteration: usize) -> Result<DualPoint> {
        match self.mode {
            BatchMode::Fixed => self.fixed_batch()?.point(lambda),
            BatchMode::Fresh => {
                let seed = derive_seed(self.seed, iteration as u64 + 1);
                match self.batch_point(lambda, seed, self.n_outer) {
                    Err(Error::NonPositiveM(_)) => {
                        self.batch_point(lambda, derive_seed(seed, u64::MAX), 2 * self.n_outer)
                    }
                    other => other,
                }
            }
        }
    }

    fn support(&mut self) -> Result<(f64, f64, f64)> {
        Ok(self.fixed_batch()?.z_summary())
    }
}

/// A fixed batch answers every query; lets several radii share one batch.
impl DualOracle for RmlmcBatch {
    fn evaluate(&mut self, lambda: f64, _iteration: usize) -> Result<DualPoint> {
        self.point(lambda)
    }

    fn support(&mut self) -> Result<(f64, f64, f64)> {
        Ok(self.z_summary())
    }
}

/// Ascent rule for the dual variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AscentConfig {
    /// starting point; `None` uses `sd(Z) / sqrt(2 delta)`, the small-radius optimum
    pub lambda0: Option<f64>,
    /// `alpha_k = step0 / (1 + k / decay)`
    pub step0: f64,
    pub decay: f64,
    pub max_iters: usize,
    pub tol: f64,
    /// scale each step by the inverse curvature of the dual objective
    pub newton: bool,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self { lambda0: None, step0: 1.0, decay: 50.0, max_iters: 200, tol: 1e-6, newton: true }
    }
}

impl AscentConfig {
    /// Plain stochastic gradient ascent with `alpha_k = 0.01 / (1 + k / 50)`.
    pub fn gradient() -> Self {
        Self { lambda0: None, step0: 0.01, decay: 50.0, max_iters: 2000, tol: 1e-7, newton: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEvalResult {
    pub robust_value: f64,
    pub lambda_star: f64,
    pub std_err: f64,
    pub n_outer: usize,
    pub iterations: usize,
    /// estimate of `M(lambda*)`
    #[serde(skip)]
    pub m_hat: f64,
    #[serde(skip)]
    pub lambda_upper: f64,
    #[serde(skip)]
    pub converged: bool,
}

/// Projected ascent on `lambda` for the KL dual.
pub fn maximize_kl_dual<O: DualOracle + ?Sized>(
    oracle: &mut O,
    delta: f64,
    cfg: &AscentConfig,
) -> Result<DualEvalResult> {
    ensure(delta > 0.0 && delta.is_finite(), || format!("radius must be positive, got {delta}"))?;
    let (mean_z, inf_z, var_z) = oracle.support()?;
    let floor = lambda_floor(mean_z);
    let upper = lambda_upper_bound(mean_z, inf_z, delta);
    if upper <= floor {
        // constant payoff: the adversary cannot move the value
        return Ok(DualEvalResult {
            robust_value: inf_z,
            lambda_star: floor,
            std_err: 0.0,
            n_outer: 0,
            iterations: 0,
            m_hat: (-inf_z / floor).exp(),
            lambda_upper: upper,
            converged: true,
        });
    }
    let start = cfg.lambda0.unwrap_or_else(|| (var_z / (2.0 * delta)).sqrt());
    let mut lambda = if start.is_finite() { start.clamp(floor, upper) } else { upper };
    let mut converged = false;
    let mut iterations = 0;
    for k in 0..cfg.max_iters {
        iterations = k + 1;
        let pt = oracle.evaluate(lambda, k)?;
        let alpha = cfg.step0 / (1.0 + k as f64 / cfg.decay);
        let g = pt.gradient(lambda, delta);
        let step = if cfg.newton {
            let curv = -pt.curvature(lambda);
            let raw = if curv > 0.0 && curv.is_finite() { alpha * g / curv } else { alpha * g.signum() * 0.5 * lambda };
            raw.clamp(-0.5 * lambda, 0.5 * lambda)
        } else {
            alpha * g
        };
        let next = (lambda + step).clamp(floor, upper);
        let change = (next - lambda).abs();
        lambda = next;
        if change < cfg.tol {
            converged = true;
            break;
        }
    }
    let pt = oracle.evaluate(lambda, cfg.max_iters + 1)?;
    Ok(DualEvalResult {
        robust_value: pt.objective(lambda, delta),
        lambda_star: lambda,
        std_err: if pt.n == usize::MAX { 0.0 } else { pt.std_err(lambda) },
        n_outer: if pt.n == usize::MAX { 0 } else { pt.n },
        iterations,
        m_hat: pt.log_m.exp(),
        lambda_upper: upper,
        converged,
    })
}

/// Robust value of a policy whose conditional value is sampled by `sim`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy_kl<S: InnerSimulator + ?Sized>(
    sim: &S,
    prior: &Prior,
    delta: f64,
    params: &RmlmcParams,
    n_outer: usize,
    ascent: &AscentConfig,
    mode: BatchMode,
    seed: u64,
) -> Result<DualEvalResult> {
    let mut oracle = RmlmcOracle::new(sim, prior, *params, n_outer, seed, mode);
    maximize_kl_dual(&mut oracle, delta, ascent)
}

/// `c_k(delta) = (1 + k (k - 1) delta)^{1/k}`.
pub fn cressie_read_radius_factor(k: f64, delta: f64) -> f64 {
    (1.0 + k * (k - 1.0) * delta).powf(1.0 / k)
}

/// `beta - c_k(delta) (sum_i w_i (beta - z_i)_+^{k*})^{1/k*}`, `k* = k / (k - 1)`.
pub fn cressie_read_objective(z: &[f64], w: &[f64], k: f64, delta: f64, beta: f64) -> f64 {
    let ks = k / (k - 1.0);
    let s: f64 = z.iter().zip(w).map(|(zi, wi)| wi * (beta - zi).max(0.0).powf(ks)).sum();
    beta - cressie_read_radius_factor(k, delta) * s.powf(1.0 / ks)
}

/// Maximizes the Cressie–Read dual over `beta` by golden-section search.
///
/// For small radii the maximizer sits well above `max z` (all hinge terms
/// active), at distance of order `range / sqrt(delta)`, so the default bracket
/// is `[min z - range, max z + range (1 + 4 max(1, 1/(k-1)) / sqrt(2 delta))]`.
/// At `delta = 0` the supremum is the weighted mean, approached as
/// `beta -> inf`, and `(mean, inf)` is returned. Returns `(value, beta*)`.
pub fn cressie_read_dual(z: &[f64], w: &[f64], k: f64, delta: f64, bracket: Option<(f64, f64)>) -> Result<(f64, f64)> {
    ensure(k > 1.0, || format!("Cressie-Read order must exceed 1, got {k}"))?;
    ensure(delta >= 0.0, || format!("radius must be non-negative, got {delta}"))?;
    if z.len() != w.len() || z.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} values for {} weights", z.len(), w.len())));
    }
    let total: f64 = w.iter().sum();
    ensure(total > 0.0 && w.iter().all(|v| *v >= 0.0), || "weights must be non-negative with positive total".into())?;
    let w: Vec<f64> = w.iter().map(|v| v / total).collect();
    let zmin = z.iter().copied().fold(f64::INFINITY, f64::min);
    let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = zmax - zmin;
    if delta == 0.0 && bracket.is_none() {
        let mean: f64 = z.iter().zip(&w).map(|(zi, wi)| zi * wi).sum();
        return Ok((mean, if range > 0.0 { f64::INFINITY } else { zmax }));
    }
    let (mut lo, mut hi) = bracket.unwrap_or_else(|| {
        let reach = 4.0 * (1.0 / (k - 1.0)).max(1.0) / (2.0 * delta).sqrt();
        (zmin - range, zmax + range * (1.0 + reach))
    });
    if !(lo.is_finite() && hi.is_finite()) || hi < lo {
        return Err(Error::EmptyBracket { lo, hi });
    }
    let f = |beta: f64| cressie_read_objective(z, &w, k, delta, beta);
    if hi == lo {
        return Ok((f(lo), lo));
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    let scale = lo.abs().max(hi.abs()).max(1.0);
    for _ in 0..300 {
        if hi - lo <= 1e-13 * scale {
            break;
        }
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        }
    }
    let candidates = [(f1, x1), (f2, x2), (f(lo), lo), (f(hi), hi)];
    let best = candidates.iter().copied().fold((f64::NEG_INFINITY, lo), |a, b| if b.0 > a.0 { b } else { a });
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::{primal_inner_inf, FinitePrior};

    #[test]
    fn objective_and_bound_examples() {
        assert_eq!(kl_dual_objective(1.0, 3.0, 0.2).unwrap(), -0.6000000000000001);
        assert!(matches!(kl_dual_objective(0.0, 1.0, 0.1), Err(Error::NonPositiveM(_))));
        assert_eq!(lambda_upper_bound(2.0, 1.0, 0.5), 2.0);
        assert_eq!(lambda_upper_bound(1.0, 1.0, 0.5), 0.0);
    }

    #[test]
    fn level_pmf() {
        let p = RmlmcParams::default();
        assert!((p.pmf(3) - 0.65).abs() < 1e-15);
        assert!((p.pmf(4) - 0.2275).abs() < 1e-15);
        assert_eq!(p.pmf(2), 0.0);
        assert!(RmlmcParams::new(0.5, 0).is_err());
        assert!(RmlmcParams::new(0.75, 0).is_err());
    }

    #[test]
    fn level_frequencies_follow_pmf() {
        let p = RmlmcParams::default();
        let mut rng = rng_from_seed(1);
        let n = 200_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let l = p.sample_level(&mut rng);
            if l < 7 {
                counts[(l - 3) as usize] += 1;
            }
        }
        for (j, c) in counts.iter().enumerate() {
            let pj = p.pmf(3 + j as u32);
            let se = (pj * (1.0 - pj) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - pj).abs() < 4.0 * se);
        }
    }

    #[test]
    fn derivative_transform_value() {
        assert!((derivative_transform(1.0, 1.0) - (-1f64).exp()).abs() < 1e-16);
    }

    #[test]
    fn deterministic_inner_is_exact() {
        let sim = ExactInner(|_: &[f64]| 0.7);
        let params = RmlmcParams::default();
        for seed in 0..20 {
            let v = rmlmc_single(&sim, &[0.0], 2.0, &params, seed).unwrap();
            assert_eq!(v, (-0.35f64).exp());
        }
        let prior = Prior::Finite(FinitePrior::scalar(&[1.0], &[1.0]).unwrap());
        let (m, var) = rmlmc_estimate_m(&sim, &prior, 2.0, &params, 50, 3).unwrap();
        assert_eq!(var, 0.0);
        assert!((m - (-0.35f64).exp()).abs() < 1e-15);
        let d = rmlmc_derivative(&sim, &prior, 2.0, &params, 50, 3).unwrap();
        assert!((d - derivative_transform(0.7, 2.0)).abs() < 1e-15);
    }

    #[test]
    fn exact_oracle_two_point_instance() {
        let mut oracle = ExactFiniteOracle::new(vec![0.5, 0.5], vec![0.0, 1.0]).unwrap();
        let delta = 0.0977;
        let res = maximize_kl_dual(&mut oracle, delta, &AscentConfig::default()).unwrap();
        let prior = FinitePrior::scalar(&[0.0, 1.0], &[0.5, 0.5]).unwrap();
        let primal = primal_inner_inf(&prior, &[0.0, 1.0], delta).unwrap();
        assert!((res.robust_value - primal).abs() < 1e-8, "{} vs {primal}", res.robust_value);
        assert!((res.robust_value - 0.28).abs() < 5e-3);
        assert!(res.lambda_star <= 0.5 / delta);
        assert!(res.converged);
    }

    #[test]
    fn constant_payoff_is_unmovable() {
        let mut oracle = ExactFiniteOracle::new(vec![0.2, 0.8], vec![1.5, 1.5]).unwrap();
        for delta in [1e-3, 0.5, 10.0] {
            let res = maximize_kl_dual(&mut oracle, delta, &AscentConfig::default()).unwrap();
            assert_eq!(res.robust_value, 1.5);
        }
    }

    #[test]
    fn gradient_mode_also_converges() {
        let mut oracle = ExactFiniteOracle::new(vec![0.5, 0.5], vec![0.0, 1.0]).unwrap();
        let cfg = AscentConfig { step0: 0.5, max_iters: 20_000, ..AscentConfig::gradient() };
        let res = maximize_kl_dual(&mut oracle, 0.0977, &cfg).unwrap();
        let exact = maximize_kl_dual(&mut oracle, 0.0977, &AscentConfig::default()).unwrap();
        assert!((res.robust_value - exact.robust_value).abs() < 1e-6);
    }

    #[test]
    fn cressie_read_examples() {
        let (v, _) = cressie_read_dual(&[0.0, 1.0], &[0.5, 0.5], 2.0, 0.0, None).unwrap();
        assert!((v - 0.5).abs() < 1e-9);
        let (v, b) = cressie_read_dual(&[0.4, 0.4], &[0.3, 0.7], 3.0, 1.0, None).unwrap();
        assert!((v - 0.4).abs() < 1e-12 && (b - 0.4).abs() < 1e-12);
        assert!(matches!(
            cressie_read_dual(&[0.0], &[1.0], 2.0, 0.1, Some((1.0, 0.0))),
            Err(Error::EmptyBracket { .. })
        ));
    }

    #[test]
    fn serialized_result_has_public_fields_only() {
        let r = DualEvalResult {
            robust_value: 1.0,
            lambda_star: 2.0,
            std_err: 0.1,
            n_outer: 10,
            iterations: 3,
            m_hat: 0.5,
            lambda_upper: 4.0,
            converged: true,
        };
        let v = serde_json::to_value(&r).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["iterations", "lambda_star", "n_outer", "robust_value", "std_err"]);
    }
}
