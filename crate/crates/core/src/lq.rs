//! Linear–quadratic control with an unknown drift `A(theta) = A0 + sum theta_i A_i`:
//! Riccati solver, GLS identification, the certainty-equivalent controller and
//! robust gain learning against the fixed-lambda KL dual objective.

use crate::error::{ensure, Error, Result};
use crate::priors::Prior;
use crate::quadrature::log_sum_exp;
use crate::rng::{derive_seed, rng_from_seed};
use crate::sde::{lq_rollout_cost, LqTrajectory, LqWorkspace, TimeGrid};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Riccati solutions with a norm above this are reported as a blow-up.
pub const RICCATI_BLOWUP: f64 = 1e12;

/// Reward assigned to rollouts that explode or fall below it.
pub const EXPLODED_REWARD: f64 = -1e6;

/// `dX = (A(theta) X + G u) dt + Sigma dW` with running cost `X'QX + u'Ru` and
/// terminal cost `X_T' Q_T X_T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LqModelRepr", into = "LqModelRepr")]
pub struct LqModel {
    pub a0: DMatrix<f64>,
    pub a_list: Vec<DMatrix<f64>>,
    pub g: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub q_t: DMatrix<f64>,
    pub r_mat: DMatrix<f64>,
    pub grid: TimeGrid,
}

fn check_shape(name: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::DimensionMismatch(format!(
            "{name} is {} x {}, expected {rows} x {cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    ensure(m.iter().all(|v| v.is_finite()), || format!("{name} has non-finite entries"))
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (m - m.transpose()).amax() <= 1e-10 * scale
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigenvalues().min()
}

impl LqModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a0: DMatrix<f64>,
        a_list: Vec<DMatrix<f64>>,
        g: DMatrix<f64>,
        sigma: DMatrix<f64>,
        q: DMatrix<f64>,
        q_t: DMatrix<f64>,
        r_mat: DMatrix<f64>,
        grid: TimeGrid,
    ) -> Result<Self> {
        let d = a0.nrows();
        ensure(d >= 1, || "state dimension must be positive".into())?;
        check_shape("A0", &a0, d, d)?;
        for (i, a) in a_list.iter().enumerate() {
            check_shape(&format!("A{}", i + 1), a, d, d)?;
        }
        let k = g.ncols();
        ensure(k >= 1, || "control dimension must be positive".into())?;
        check_shape("G", &g, d, k)?;
        ensure(sigma.ncols() >= 1, || "noise dimension must be positive".into())?;
        check_shape("Sigma", &sigma, d, sigma.ncols())?;
        check_shape("Q", &q, d, d)?;
        check_shape("Q_T", &q_t, d, d)?;
        check_shape("R", &r_mat, k, k)?;
        for (name, m) in [("Q", &q), ("Q_T", &q_t)] {
            ensure(is_symmetric(m), || format!("{name} must be symmetric"))?;
            ensure(min_eigenvalue(m) >= -1e-10 * m.amax().max(1.0), || {
                format!("{name} must be positive semidefinite")
            })?;
        }
        ensure(is_symmetric(&r_mat) && r_mat.clone().cholesky().is_some(), || {
            "R must be symmetric positive definite".into()
        })?;
        Ok(Self { a0, a_list, g, sigma, q, q_t, r_mat, grid })
    }

    pub fn state_dim(&self) -> usize {
        self.a0.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn noise_dim(&self) -> usize {
        self.sigma.ncols()
    }

    pub fn param_dim(&self) -> usize {
        self.a_list.len()
    }

    /// `A(theta) = A0 + sum theta_i A_i`.
    pub fn drift(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        if theta.len() != self.param_dim() {
            return Err(Error::DimensionMismatch(format!(
                "theta has length {}, model expects {}",
                theta.len(),
                self.param_dim()
            )));
        }
        let mut a = self.a0.clone();
        for (t, ai) in theta.iter().zip(&self.a_list) {
            a += ai * *t;
        }
        Ok(a)
    }

    /// The synthetic benchmark family: tridiagonal `A0`, random dense `A_j`,
    /// the first `k` coordinates actuated, isotropic noise and costs.
    pub fn benchmark(cfg: &LqBenchmark) -> Result<Self> {
        let (d, k, m) = (cfg.d, cfg.k, cfg.m);
        ensure(k <= d, || format!("cannot actuate {k} of {d} coordinates"))?;
        let mut a0 = DMatrix::zeros(d, d);
        for i in 0..d {
            a0[(i, i)] = -cfg.a_diag;
            if i + 1 < d {
                a0[(i, i + 1)] = cfg.a_upper;
                a0[(i + 1, i)] = cfg.a_lower;
            }
        }
        let mut rng = rng_from_seed(cfg.basis_seed);
        let normal = |rng: &mut crate::rng::SimRng| -> f64 { StandardNormal.sample(rng) };
        let mut a_list = Vec::with_capacity(m);
        for _ in 0..m {
            let mut diag = DMatrix::zeros(d, d);
            let mut off = DMatrix::zeros(d, d);
            for i in 0..d {
                diag[(i, i)] = normal(&mut rng);
                for j in 0..d {
                    if i != j {
                        off[(i, j)] = normal(&mut rng);
                    }
                }
            }
            let dn = diag.norm();
            let on = off.norm();
            let mut a = diag / dn * cfg.aj_diag;
            if d > 1 {
                a += off / on * cfg.aj_off;
            }
            a_list.push(a);
        }
        let mut g = DMatrix::zeros(d, k);
        for i in 0..k {
            g[(i, i)] = 1.0;
        }
        Self::new(
            a0,
            a_list,
            g,
            DMatrix::identity(d, d) * cfg.sigma_scale,
            DMatrix::identity(d, d) * cfg.q_scale,
            DMatrix::identity(d, d) * cfg.qt_scale,
            DMatrix::identity(k, k) * cfg.r_scale,
            TimeGrid::new(cfg.horizon, cfg.steps)?,
        )
    }
}

/// Knobs of [`LqModel::benchmark`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqBenchmark {
    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub horizon: f64,
    pub steps: usize,
    pub a_diag: f64,
    pub a_upper: f64,
    pub a_lower: f64,
    pub aj_diag: f64,
    pub aj_off: f64,
    pub basis_seed: u64,
    pub sigma_scale: f64,
    pub q_scale: f64,
    pub qt_scale: f64,
    pub r_scale: f64,
}

impl Default for LqBenchmark {
    fn default() -> Self {
        Self {
            d: 10,
            k: 5,
            m: 10,
            horizon: 2.0,
            steps: 100,
            a_diag: 0.6,
            a_upper: 0.15,
            a_lower: -0.1,
            aj_diag: 0.2,
            aj_off: 0.05,
            basis_seed: 12345,
            sigma_scale: 0.7,
            q_scale: 3.0,
            qt_scale: 3.0,
            r_scale: 1.0,
        }
    }
}

/// Time-varying linear feedback `u = -K(t_k) x`, clipped elementwise at `u_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqPolicy {
    gains: Vec<DMatrix<f64>>,
    pub u_max: f64,
}

impl LqPolicy {
    pub const DEFAULT_U_MAX: f64 = 50.0;

    pub fn new(gains: Vec<DMatrix<f64>>, u_max: f64) -> Result<Self> {
        ensure(!gains.is_empty(), || "policy needs at least one gain".into())?;
        ensure(u_max > 0.0, || format!("control clip must be positive, got {u_max}"))?;
        let (k, d) = gains[0].shape();
        for g in &gains {
            if g.shape() != (k, d) {
                return Err(Error::DimensionMismatch("gains must share one shape".into()));
            }
            ensure(g.iter().all(|v| v.is_finite()), || "gains must be finite".into())?;
        }
        Ok(Self { gains, u_max })
    }

    /// The same gain at every step.
    pub fn constant(gain: DMatrix<f64>, steps: usize, u_max: f64) -> Result<Self> {
        Self::new(vec![gain; steps], u_max)
    }

    pub fn zero(model: &LqModel) -> Self {
        Self {
            gains: vec![DMatrix::zeros(model.control_dim(), model.state_dim()); model.grid.steps()],
            u_max: Self::DEFAULT_U_MAX,
        }
    }

    pub fn gain(&self, step: usize) -> &DMatrix<f64> {
        &self.gains[step]
    }

    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }

    pub fn check(&self, model: &LqModel) -> Result<()> {
        if self.gains.len() != model.grid.steps() {
            return Err(Error::DimensionMismatch(format!(
                "policy has {} gains for {} steps",
                self.gains.len(),
                model.grid.steps()
            )));
        }
        if self.gains[0].shape() != (model.control_dim(), model.state_dim()) {
            return Err(Error::DimensionMismatch("gain shape does not match the model".into()));
        }
        Ok(())
    }

    /// Gains as a JSON time series of row-major matrices.
    pub fn to_json(&self) -> serde_json::Value {
        let series: Vec<Vec<Vec<f64>>> = self.gains.iter().map(rows_of).collect();
        serde_json::json!({ "u_max": self.u_max, "gains": series })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    /// `P(t_k)` for every grid node, `P(T) = Q_T`
    pub p: Vec<DMatrix<f64>>,
    pub policy: LqPolicy,
    r_inv_gt: DMatrix<f64>,
}

impl RiccatiSolution {
    /// `R^{-1} G' P(t_k)` at any node, including the horizon.
    pub fn gain_at(&self, k: usize) -> DMatrix<f64> {
        &self.r_inv_gt * &self.p[k]
    }

    /// `x0' P(0) x0 + int_0^T tr(Sigma Sigma' P(t)) dt`, trapezoidal in time.
    pub fn expected_cost(&self, model: &LqModel, x0: &[f64]) -> f64 {
        let x = DVector::from_column_slice(x0);
        let ss = &model.sigma * model.sigma.transpose();
        let dt = model.grid.dt();
        let tr: Vec<f64> = self.p.iter().map(|p| (&ss * p).trace()).collect();
        let integral = dt * (tr.iter().sum::<f64>() - 0.5 * (tr[0] + tr[tr.len() - 1]));
        (x.transpose() * &self.p[0] * &x)[(0, 0)] + integral
    }
}

/// Integrates `-dP/dt = Q + A'P + PA - P G R^{-1} G' P`, `P(T) = Q_T`, backward
/// with classical RK4 on the model grid.
pub fn riccati_solve(model: &LqModel, a: &DMatrix<f64>) -> Result<RiccatiSolution> {
    let d = model.state_dim();
    check_shape("A", a, d, d)?;
    let r_inv = model.r_mat.clone().try_inverse().ok_or(Error::SingularInformation)?;
    let r_inv_gt = &r_inv * model.g.transpose();
    let s = &model.g * &r_inv_gt;
    let rhs = |p: &DMatrix<f64>| -> DMatrix<f64> { &model.q + a.transpose() * p + p * a - p * &s * p };
    let steps = model.grid.steps();
    let h = model.grid.dt();
    let mut ps = vec![DMatrix::zeros(d, d); steps + 1];
    ps[steps] = model.q_t.clone();
    for k in (0..steps).rev() {
        let p = &ps[k + 1];
        let k1 = rhs(p);
        let k2 = rhs(&(p + &k1 * (0.5 * h)));
        let k3 = rhs(&(p + &k2 * (0.5 * h)));
        let k4 = rhs(&(p + &k3 * h));
        let mut next = p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        next = (&next + next.transpose()) * 0.5;
        if !next.iter().all(|v| v.is_finite()) || next.norm() > RICCATI_BLOWUP {
            return Err(Error::RiccatiBlowup { t: model.grid.time(k) });
        }
        ps[k] = next;
    }
    let gains = ps[..steps].iter().map(|p| &r_inv_gt * p).collect();
    Ok(RiccatiSolution { policy: LqPolicy::new(gains, LqPolicy::DEFAULT_U_MAX)?, p: ps, r_inv_gt })
}

/// Least-squares estimate and information matrix of `theta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefFeatures {
    pub theta_hat: Vec<f64>,
    /// `m x m`, row-major
    pub s_prec: Vec<Vec<f64>>,
}

impl BeliefFeatures {
    pub fn info_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.s_prec)
    }
}

/// Whitened least-squares estimate of `theta` from one trajectory.
///
/// Regresses `Sigma^{-1} (Delta Y_k / dt - A0 X_k)` on `Sigma^{-1} [A_1 X_k, ..., A_m X_k]`
/// with `Delta Y_k = X_{k+1} - X_k - G u_k dt`. The information matrix is the
/// unweighted sum of `Phi~' Phi~` over steps.
pub fn gls_estimate(traj: &LqTrajectory, model: &LqModel, ridge: f64) -> Result<BeliefFeatures> {
    ensure(ridge >= 0.0, || format!("ridge must be non-negative, got {ridge}"))?;
    let d = model.state_dim();
    let m = model.param_dim();
    let steps = traj.controls.nrows();
    if traj.states.ncols() != d || traj.states.nrows() != steps + 1 || traj.controls.ncols() != model.control_dim() {
        return Err(Error::DimensionMismatch("trajectory does not match the model".into()));
    }
    if model.noise_dim() != d {
        return Err(Error::DimensionMismatch("whitening needs a square Sigma".into()));
    }
    let sigma_inv = model.sigma.clone().try_inverse().ok_or(Error::SingularInformation)?;
    let dt = traj.grid.dt();
    let mut normal = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    let mut phi = DMatrix::<f64>::zeros(d, m);
    for k in 0..steps {
        let x = traj.states.row(k).transpose();
        let x_next = traj.states.row(k + 1).transpose();
        let u = traj.controls.row(k).transpose();
        let dy = &x_next - &x - &model.g * &u * dt;
        let r = &sigma_inv * (dy / dt - &model.a0 * &x);
        for (j, aj) in model.a_list.iter().enumerate() {
            phi.set_column(j, &(&sigma_inv * (aj * &x)));
        }
        normal += phi.transpose() * &phi;
        rhs += phi.transpose() * r;
    }
    let system = &normal + DMatrix::identity(m, m) * ridge;
    let theta = if m == 0 {
        DVector::zeros(0)
    } else {
        let chol = system.cholesky().ok_or(Error::SingularInformation)?;
        chol.solve(&rhs)
    };
    if !theta.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularInformation);
    }
    Ok(BeliefFeatures { theta_hat: theta.iter().copied().collect(), s_prec: rows_of(&normal) })
}

/// Certainty-equivalent controller: Riccati gains for `A(theta_hat)`.
pub fn plugin_controller(traj: &LqTrajectory, model: &LqModel, ridge: f64) -> Result<(BeliefFeatures, LqPolicy)> {
    let belief = gls_estimate(traj, model, ridge)?;
    let a = model.drift(&belief.theta_hat)?;
    Ok((belief, riccati_solve(model, &a)?.policy))
}

/// `Z = -(running + terminal cost)`.
pub fn lq_reward(traj: &LqTrajectory) -> f64 {
    -(traj.running_cost + traj.terminal_cost)
}

/// Random exploration gain with i.i.d. `N(0, scale^2)` entries.
pub fn random_gain(model: &LqModel, scale: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = rng_from_seed(seed);
    DMatrix::from_fn(model.control_dim(), model.state_dim(), |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    })
}

/// Gains `K(t_k) = sum_p tau_k^p sum_b phi_b Psi_{p,b}` with `tau_k = k / (K - 1)`
/// and belief features `phi = [1, tanh(theta_hat), log(1 + mean|S|)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainBasis {
    degree: usize,
    features: Vec<f64>,
    k: usize,
    d: usize,
    steps: usize,
}

impl GainBasis {
    pub fn new(model: &LqModel, belief: &BeliefFeatures, degree: usize) -> Self {
        let mut features = vec![1.0];
        features.extend(belief.theta_hat.iter().map(|t| t.tanh()));
        let n = belief.s_prec.iter().map(Vec::len).sum::<usize>().max(1);
        let mean_abs = belief.s_prec.iter().flatten().map(|v| v.abs()).sum::<f64>() / n as f64;
        features.push(mean_abs.ln_1p());
        Self { degree, features, k: model.control_dim(), d: model.state_dim(), steps: model.grid.steps() }
    }

    pub fn n_params(&self) -> usize {
        (self.degree + 1) * self.features.len() * self.k * self.d
    }

    fn block(&self) -> usize {
        self.k * self.d
    }

    /// Parameters reproducing the constant gain `k0` through the constant feature.
    pub fn params_for_constant(&self, k0: &DMatrix<f64>) -> Vec<f64> {
        let mut psi = vec![0.0; self.n_params()];
        psi[..self.block()].copy_from_slice(k0.as_slice());
        psi
    }

    pub fn policy(&self, psi: &[f64], u_max: f64) -> Result<LqPolicy> {
        if psi.len() != self.n_params() {
            return Err(Error::DimensionMismatch(format!("{} parameters, basis has {}", psi.len(), self.n_params())));
        }
        let block = self.block();
        let nf = self.features.len();
        let denom = (self.steps.max(2) - 1) as f64;
        let gains = (0..self.steps)
            .map(|step| {
                let tau = step as f64 / denom;
                let mut gain = vec![0.0; block];
                for p in 0..=self.degree {
                    let tp = tau.powi(p as i32);
                    for (b, phi) in self.features.iter().enumerate() {
                        let w = tp * phi;
                        let chunk = &psi[(p * nf + b) * block..(p * nf + b + 1) * block];
                        for (g, c) in gain.iter_mut().zip(chunk) {
                            *g += w * c;
                        }
                    }
                }
                DMatrix::from_vec(self.k, self.d, gain)
            })
            .collect();
        LqPolicy::new(gains, u_max)
    }
}

/// Settings of [`drbc_lq_learn`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqLearnConfig {
    /// `lambda = c_lam / sqrt(delta)`
    pub c_lam: f64,
    pub n_theta: usize,
    pub b_traj: usize,
    pub s_in: usize,
    /// SPSA gain `eta_k = eta / (1 + k)^0.602`
    pub eta: f64,
    /// SPSA perturbation `c_k = perturb / (1 + k)^0.101`
    pub perturb: f64,
    pub basis_size: usize,
    pub grad_clip: f64,
    pub u_max: f64,
}

impl Default for LqLearnConfig {
    fn default() -> Self {
        Self {
            c_lam: 1.0,
            n_theta: 32,
            b_traj: 64,
            s_in: 200,
            eta: 0.01,
            perturb: 0.05,
            basis_size: 2,
            grad_clip: 10.0,
            u_max: LqPolicy::DEFAULT_U_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqLearnResult {
    pub policy: LqPolicy,
    pub psi: Vec<f64>,
    pub lambda: f64,
    /// dual objective of the current parameters on each step's batch
    pub history: Vec<f64>,
    /// norm of each (clipped) gradient estimate
    pub grad_norms: Vec<f64>,
    pub accepted: usize,
}

/// One learning batch: prior draws with their drift matrices and a seed for
/// the initial states and noise.
struct Batch {
    drifts: Vec<DMatrix<f64>>,
    seed: u64,
}

impl Batch {
    fn draw(model: &LqModel, prior: &Prior, n_theta: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(derive_seed(seed, u64::MAX));
        let drifts = (0..n_theta).map(|_| model.drift(&prior.sample(&mut rng))).collect::<Result<_>>()?;
        Ok(Self { drifts, seed })
    }
}

/// Mean reward of `reps` rollouts from `x0 ~ N(0, I)`, rollout `j` seeded by
/// `derive_seed(seed, j)`; exploded rollouts count as [`EXPLODED_REWARD`].
pub fn mean_rollout_reward(model: &LqModel, a: &DMatrix<f64>, policy: &LqPolicy, reps: usize, seed: u64) -> f64 {
    let d = model.state_dim();
    let mut ws = LqWorkspace::new(d, model.control_dim());
    let mut x0 = vec![0.0; d];
    let mut total = 0.0;
    for j in 0..reps {
        let mut rng = rng_from_seed(derive_seed(seed, j as u64));
        for v in x0.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let reward = match lq_rollout_cost(model, a, policy, &x0, &mut rng, &mut ws) {
            Ok(cost) => (-cost).max(EXPLODED_REWARD),
            Err(_) => EXPLODED_REWARD,
        };
        total += reward;
    }
    total / reps as f64
}

fn dual_objective(model: &LqModel, batch: &Batch, policy: &LqPolicy, b_traj: usize, lambda: f64, delta: f64) -> f64 {
    let z: Vec<f64> = batch
        .drifts
        .par_iter()
        .enumerate()
        .map(|(i, a)| mean_rollout_reward(model, a, policy, b_traj, derive_seed(batch.seed, i as u64)))
        .collect();
    let logs: Vec<f64> = z.iter().map(|zi| -zi / lambda).collect();
    let log_mean = log_sum_exp(&logs) - (z.len() as f64).ln();
    -lambda * delta - lambda * log_mean
}

/// Learns robust linear-in-features gains by two-point simultaneous-perturbation
/// ascent on `-lambda delta - lambda log mean_i exp(-Z_i / lambda)`.
///
/// The gains start from the Riccati solution for the prior mean, averaged over
/// time. Each step uses one batch of prior draws, initial states and noise for
/// all of its evaluations; a candidate update is kept only if it does not lower
/// the objective on that batch.
pub fn drbc_lq_learn(
    model: &LqModel,
    prior: &Prior,
    delta: f64,
    cfg: &LqLearnConfig,
    belief: &BeliefFeatures,
    seed: u64,
) -> Result<LqLearnResult> {
    ensure(delta > 0.0, || format!("radius must be positive, got {delta}"))?;
    ensure(cfg.n_theta >= 1 && cfg.b_traj >= 1, || "need at least one prior draw and rollout".into())?;
    if prior.dim() != model.param_dim() {
        return Err(Error::DimensionMismatch(format!(
            "prior has dimension {}, model has {} parameters",
            prior.dim(),
            model.param_dim()
        )));
    }
    let lambda = cfg.c_lam / delta.sqrt();
    let basis = GainBasis::new(model, belief, cfg.basis_size);
    let init = riccati_solve(model, &model.drift(&prior.mean())?)?;
    let steps = model.grid.steps() as f64;
    let avg_gain =
        init.policy.gains().iter().fold(DMatrix::zeros(model.control_dim(), model.state_dim()), |acc, g| acc + g)
            / steps;
    let mut psi = basis.params_for_constant(&avg_gain);
    let n = psi.len();
    let mut history = Vec::with_capacity(cfg.s_in);
    let mut grad_norms = Vec::with_capacity(cfg.s_in);
    let mut accepted = 0;
    for step in 0..cfg.s_in {
        let step_seed = derive_seed(seed, step as u64);
        let batch = Batch::draw(model, prior, cfg.n_theta, step_seed)?;
        let objective = |p: &[f64]| -> Result<f64> {
            Ok(dual_objective(model, &batch, &basis.policy(p, cfg.u_max)?, cfg.b_traj, lambda, delta))
        };
        let kf = (step + 1) as f64;
        let ck = cfg.perturb / kf.powf(0.101);
        let eta_k = cfg.eta / kf.powf(0.602);
        let mut rng = rng_from_seed(derive_seed(step_seed, 0xD1CE));
        let signs: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let plus: Vec<f64> = psi.iter().zip(&signs).map(|(p, s)| p + ck * s).collect();
        let minus: Vec<f64> = psi.iter().zip(&signs).map(|(p, s)| p - ck * s).collect();
        let diff = (objective(&plus)? - objective(&minus)?) / (2.0 * ck);
        let mut grad: Vec<f64> = signs.iter().map(|s| diff * s).collect();
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            grad.iter_mut().for_each(|g| *g *= cfg.grad_clip / norm);
        }
        grad_norms.push(norm.min(cfg.grad_clip));
        let current = objective(&psi)?;
        let candidate: Vec<f64> = psi.iter().zip(&grad).map(|(p, g)| p + eta_k * g).collect();
        let cand_obj = objective(&candidate)?;
        if cand_obj >= current {
            psi = candidate;
            accepted += 1;
            history.push(cand_obj);
        } else {
            history.push(current);
        }
    }
    Ok(LqLearnResult { policy: basis.policy(&psi, cfg.u_max)?, psi, lambda, history, grad_norms, accepted })
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}

#[derive(Serialize, Deserialize)]
struct LqModelRepr {
    a0: Vec<Vec<f64>>,
    a_list: Vec<Vec<Vec<f64>>>,
    g: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    q_t: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    horizon: f64,
    steps: usize,
}

impl TryFrom<LqModelRepr> for LqModel {
    type Error = Error;
    fn try_from(r: LqModelRepr) -> Result<Self> {
        for rows in [&r.a0, &r.g, &r.sigma, &r.q, &r.q_t, &r.r].into_iter().chain(r.a_list.iter()) {
            let c = rows.first().map_or(0, Vec::len);
            ensure(rows.iter().all(|row| row.len() == c), || "ragged matrix rows".into())?;
        }
        LqModel::new(
            from_rows(&r.a0),
            r.a_list.iter().map(|a| from_rows(a)).collect(),
            from_rows(&r.g),
            from_rows(&r.sigma),
            from_rows(&r.q),
            from_rows(&r.q_t),
            from_rows(&r.r),
            TimeGrid::new(r.horizon, r.steps)?,
        )
    }
}

impl From<LqModel> for LqModelRepr {
    fn from(m: LqModel) -> Self {
        LqModelRepr {
            a0: rows_of(&m.a0),
            a_list: m.a_list.iter().map(rows_of).collect(),
            g: rows_of(&m.g),
            sigma: rows_of(&m.sigma),
            q: rows_of(&m.q),
            q_t: rows_of(&m.q_t),
            r: rows_of(&m.r_mat),
            horizon: m.grid.horizon(),
            steps: m.grid.steps(),
        }
    }
}
