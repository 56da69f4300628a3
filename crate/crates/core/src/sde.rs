//! Euler–Maruyama simulation of the controlled wealth process and the
//! linear–quadratic state process on a uniform time grid.
//!
//! All simulators are pure functions of their inputs and a [`NoiseBlock`], so two
//! policies run on the same block see common random numbers and differ only
//! through the control.

use crate::error::{ensure, Error, Result};
use crate::lq::{LqModel, LqPolicy};
use crate::merton::MertonMarket;
use crate::rng::{rng_from_seed, SimRng};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Paths whose state exceeds this magnitude are treated as exploded.
pub const BLOWUP_THRESHOLD: f64 = 1e12;

/// Uniform grid `0 = t_0 < t_1 < ... < t_steps = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        ensure(horizon.is_finite() && horizon > 0.0, || format!("horizon must be positive, got {horizon}"))?;
        ensure(steps >= 1, || "grid needs at least one step".to_string())?;
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Time of node `k`; the last node is exactly the horizon.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.time(k)).collect()
    }
}

/// Brownian increments, `steps x dim`, row-major. Each entry is `N(0, dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBlock {
    increments: Vec<f64>,
    steps: usize,
    dim: usize,
    dt: f64,
    seed: u64,
}

impl NoiseBlock {
    pub fn from_increments(grid: TimeGrid, dim: usize, increments: Vec<f64>, seed: u64) -> Result<Self> {
        if increments.len() != grid.steps() * dim || dim == 0 {
            return Err(Error::DimensionMismatch(format!(
                "expected {} x {} increments, got {}",
                grid.steps(),
                dim,
                increments.len()
            )));
        }
        Ok(Self { increments, steps: grid.steps(), dim, dt: grid.dt(), seed })
    }

    /// A block with all increments zero; drives noiseless simulations.
    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self { increments: vec![0.0; grid.steps() * dim], steps: grid.steps(), dim, dt: grid.dt(), seed: 0 }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.increments[k * self.dim..(k + 1) * self.dim]
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.increments[k * self.dim + j]
    }

    /// Brownian path `W_{t_0}, ..., W_{t_steps}` of column `j`.
    pub fn brownian_path(&self, j: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(self.steps + 1);
        let mut acc = 0.0;
        w.push(acc);
        for k in 0..self.steps {
            acc += self.get(k, j);
            w.push(acc);
        }
        w
    }

    fn check_grid(&self, grid: &TimeGrid, dim: usize) -> Result<()> {
        if self.steps != grid.steps() || self.dim != dim {
            return Err(Error::DimensionMismatch(format!(
                "noise is {} x {}, simulation needs {} x {}",
                self.steps,
                self.dim,
                grid.steps(),
                dim
            )));
        }
        Ok(())
    }
}

/// Draws `N(0, dt)` increments for `grid.steps() x dim`, deterministic in `seed`.
///
/// Panics if `dim == 0`.
pub fn make_noise(seed: u64, grid: TimeGrid, dim: usize) -> NoiseBlock {
    assert!(dim >= 1, "noise dimension must be at least 1");
    let mut rng = rng_from_seed(seed);
    let sd = grid.dt().sqrt();
    let increments = (0..grid.steps() * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            sd * z
        })
        .collect();
    NoiseBlock { increments, steps: grid.steps(), dim, dt: grid.dt(), seed }
}

/// A feedback rule for the fraction of wealth held in the stock, read from the
/// observable statistic `y = Y_t`.
pub trait FractionRule {
    fn fraction(&self, t: f64, y: f64) -> f64;
}

impl<F: Fn(f64, f64) -> f64> FractionRule for F {
    fn fraction(&self, t: f64, y: f64) -> f64 {
        self(t, y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WealthPath {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

impl WealthPath {
    pub fn terminal(&self) -> f64 {
        *self.values.last().expect("wealth path is never empty")
    }
}

/// Core Euler loop for `dX = X (r dt + pi (b(t) - r) dt + pi sigma dW)`.
///
/// `Y` is accumulated alongside as `sigma^-1 (b - r) dt + dW`, which is what
/// [`price_to_y`] recovers from observed prices. Wealth that reaches zero stays
/// there.
fn wealth_euler<D, P, N, R>(
    market: &MertonMarket,
    drift: D,
    policy: &P,
    grid: &TimeGrid,
    mut dw: N,
    mut record: R,
) -> Result<f64>
where
    D: Fn(f64) -> f64,
    P: FractionRule + ?Sized,
    N: FnMut(usize) -> f64,
    R: FnMut(f64),
{
    let dt = grid.dt();
    let (r, sigma) = (market.r, market.sigma);
    let mut x = market.x0;
    let mut y = 0.0;
    for k in 0..grid.steps() {
        let t = k as f64 * dt;
        let b = drift(t);
        let w = dw(k);
        if x > 0.0 {
            let pi = policy.fraction(t, y);
            x *= 1.0 + r * dt + pi * (b - r) * dt + pi * sigma * w;
            if !x.is_finite() || x.abs() > BLOWUP_THRESHOLD {
                return Err(Error::NonFinitePath { step: k + 1 });
            }
            if x < 0.0 {
                x = 0.0;
            }
        }
        y += (b - r) / sigma * dt + w;
        record(x);
    }
    Ok(x)
}

/// Simulates the wealth under a constant drift `b`.
pub fn simulate_wealth<P: FractionRule + ?Sized>(
    market: &MertonMarket,
    b: f64,
    policy: &P,
    noise: &NoiseBlock,
) -> Result<WealthPath> {
    simulate_wealth_with_drift(market, |_| b, policy, noise)
}

/// Simulates the wealth under a deterministic, possibly time-varying drift.
pub fn simulate_wealth_with_drift<D, P>(
    market: &MertonMarket,
    drift: D,
    policy: &P,
    noise: &NoiseBlock,
) -> Result<WealthPath>
where
    D: Fn(f64) -> f64,
    P: FractionRule + ?Sized,
{
    let grid = market.grid;
    noise.check_grid(&grid, 1)?;
    let mut values = Vec::with_capacity(grid.steps() + 1);
    values.push(market.x0);
    wealth_euler(market, drift, policy, &grid, |k| noise.get(k, 0), |x| values.push(x))?;
    Ok(WealthPath { grid, values })
}

/// Terminal wealth only, drawing increments straight from `rng`.
///
/// Uses the same draw order as [`make_noise`], so a generator seeded with `s`
/// reproduces `simulate_wealth` on `make_noise(s, grid, 1)`.
pub fn simulate_wealth_terminal<P: FractionRule + ?Sized>(
    market: &MertonMarket,
    b: f64,
    policy: &P,
    rng: &mut SimRng,
) -> Result<f64> {
    let grid = market.grid;
    let sd = grid.dt().sqrt();
    wealth_euler(
        market,
        |_| b,
        policy,
        &grid,
        |_| {
            let z: f64 = StandardNormal.sample(rng);
            sd * z
        },
        |_| {},
    )
}

/// Exact GBM log-prices `log(S_t / S_0) = (b - sigma^2/2) t + sigma W_t` on the grid.
pub fn simulate_log_price(b: f64, sigma: f64, grid: TimeGrid, noise: &NoiseBlock) -> Result<Vec<f64>> {
    noise.check_grid(&grid, 1)?;
    let w = noise.brownian_path(0);
    Ok((0..=grid.steps())
        .map(|k| {
            let t = grid.time(k);
            (b - 0.5 * sigma * sigma) * t + sigma * w[k]
        })
        .collect())
}

/// `Y_t = sigma^-1 (log(S_t/S_0) + sigma^2 t / 2 - r t)` at every grid node.
///
/// `log_prices[k]` is `log(S_{t_k} / S_0)`.
pub fn price_to_y(log_prices: &[f64], grid: TimeGrid, r: f64, sigma: f64) -> Result<Vec<f64>> {
    ensure(sigma > 0.0, || format!("volatility must be positive, got {sigma}"))?;
    if log_prices.len() != grid.steps() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "expected {} log-prices, got {}",
            grid.steps() + 1,
            log_prices.len()
        )));
    }
    Ok(log_prices
        .iter()
        .enumerate()
        .map(|(k, &ls)| {
            let t = grid.time(k);
            (ls + 0.5 * sigma * sigma * t - r * t) / sigma
        })
        .collect())
}

/// A simulated LQ path with its accumulated quadratic cost.
#[derive(Debug, Clone, PartialEq)]
pub struct LqTrajectory {
    pub grid: TimeGrid,
    /// `(steps + 1) x d`
    pub states: DMatrix<f64>,
    /// `steps x k`, the controls actually applied (after clipping)
    pub controls: DMatrix<f64>,
    /// `sum_k (x'Qx + u'Ru) dt`
    pub running_cost: f64,
    /// `x_T' Q_T x_T`
    pub terminal_cost: f64,
}

impl LqTrajectory {
    pub fn total_cost(&self) -> f64 {
        self.running_cost + self.terminal_cost
    }
}

/// Scratch buffers for allocation-free LQ rollouts.
#[derive(Debug, Clone)]
pub struct LqWorkspace {
    x: DVector<f64>,
    x_next: DVector<f64>,
    u: DVector<f64>,
    w: DVector<f64>,
    tmp_d: DVector<f64>,
    tmp_k: DVector<f64>,
}

impl LqWorkspace {
    pub fn new(d: usize, k: usize) -> Self {
        Self {
            x: DVector::zeros(d),
            x_next: DVector::zeros(d),
            u: DVector::zeros(k),
            w: DVector::zeros(d),
            tmp_d: DVector::zeros(d),
            tmp_k: DVector::zeros(k),
        }
    }
}

fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>, tmp: &mut DVector<f64>) -> f64 {
    tmp.gemv(1.0, m, v, 0.0);
    v.dot(tmp)
}

/// Euler loop shared by [`simulate_lq`] and [`lq_rollout_cost`]. Returns
/// `(running, terminal)` cost.
fn lq_euler<N, R>(
    model: &LqModel,
    a: &DMatrix<f64>,
    policy: &LqPolicy,
    x0: &[f64],
    ws: &mut LqWorkspace,
    mut noise_row: N,
    mut record: R,
) -> Result<(f64, f64)>
where
    N: FnMut(usize, &mut [f64]),
    R: FnMut(usize, &DVector<f64>, Option<&DVector<f64>>),
{
    let grid = model.grid;
    let dt = grid.dt();
    let u_max = policy.u_max;
    ws.x.as_mut_slice().copy_from_slice(x0);
    let mut running = 0.0;
    for step in 0..grid.steps() {
        ws.u.gemv(-1.0, policy.gain(step), &ws.x, 0.0);
        for u in ws.u.iter_mut() {
            *u = u.clamp(-u_max, u_max);
        }
        record(step, &ws.x, Some(&ws.u));
        running += (quad_form(&model.q, &ws.x, &mut ws.tmp_d) + quad_form(&model.r_mat, &ws.u, &mut ws.tmp_k)) * dt;

        noise_row(step, ws.w.as_mut_slice());
        ws.x_next.copy_from(&ws.x);
        ws.x_next.gemv(dt, a, &ws.x, 1.0);
        ws.x_next.gemv(dt, &model.g, &ws.u, 1.0);
        ws.x_next.gemv(1.0, &model.sigma, &ws.w, 1.0);
        if ws.x_next.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP_THRESHOLD) {
            return Err(Error::NonFinitePath { step: step + 1 });
        }
        std::mem::swap(&mut ws.x, &mut ws.x_next);
    }
    record(grid.steps(), &ws.x, None);
    let terminal = quad_form(&model.q_t, &ws.x, &mut ws.tmp_d);
    Ok((running, terminal))
}

fn check_lq_inputs(model: &LqModel, theta: &[f64], policy: &LqPolicy, x0: &[f64]) -> Result<()> {
    let d = model.state_dim();
    if theta.len() != model.param_dim() {
        return Err(Error::DimensionMismatch(format!(
            "theta has length {}, model expects {}",
            theta.len(),
            model.param_dim()
        )));
    }
    if x0.len() != d {
        return Err(Error::DimensionMismatch(format!("x0 has length {}, state dimension is {d}", x0.len())));
    }
    policy.check(model)
}

/// Simulates `dX = (A(theta) X + G u) dt + Sigma dW` with `u = clip(-K(t) X)`.
pub fn simulate_lq(
    model: &LqModel,
    theta: &[f64],
    policy: &LqPolicy,
    noise: &NoiseBlock,
    x0: &[f64],
) -> Result<LqTrajectory> {
    check_lq_inputs(model, theta, policy, x0)?;
    noise.check_grid(&model.grid, model.noise_dim())?;
    let a = model.drift(theta)?;
    let (d, k) = (model.state_dim(), model.control_dim());
    let steps = model.grid.steps();
    let mut states = DMatrix::zeros(steps + 1, d);
    let mut controls = DMatrix::zeros(steps, k);
    let mut ws = LqWorkspace::new(d, k);
    let (running, terminal) = lq_euler(
        model,
        &a,
        policy,
        x0,
        &mut ws,
        |step, w| w.copy_from_slice(noise.row(step)),
        |step, x, u| {
            states.row_mut(step).copy_from(&x.transpose());
            if let Some(u) = u {
                controls.row_mut(step).copy_from(&u.transpose());
            }
        },
    )?;
    Ok(LqTrajectory { grid: model.grid, states, controls, running_cost: running, terminal_cost: terminal })
}

/// Total cost of one rollout with precomputed drift `a`, drawing the noise
/// from `rng` in [`make_noise`] order. No allocation besides `ws`.
pub fn lq_rollout_cost(
    model: &LqModel,
    a: &DMatrix<f64>,
    policy: &LqPolicy,
    x0: &[f64],
    rng: &mut SimRng,
    ws: &mut LqWorkspace,
) -> Result<f64> {
    let sd = model.grid.dt().sqrt();
    let (running, terminal) = lq_euler(
        model,
        a,
        policy,
        x0,
        ws,
        |_, w| {
            for v in w.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = sd * z;
            }
        },
        |_, _, _| {},
    )?;
    Ok(running + terminal)
}
