//! Priors on the latent drift parameter, KL arithmetic on finite supports and
//! the exponential-tilting solvers for worst-case means over a KL ball.

use crate::error::{ensure, Error, Result};
use crate::rng::{rng_from_seed, SimRng};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Tolerance on the total mass of user-supplied probabilities.
const MASS_TOL: f64 = 1e-9;

/// A distribution on finitely many (vector) values.
///
/// Atoms with zero probability are allowed so that tilted distributions that
/// vanish on part of the support still share their support with the base prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FiniteRepr", into = "FiniteRepr")]
pub struct FinitePrior {
    values: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl FinitePrior {
    pub fn new(values: Vec<Vec<f64>>, probs: Vec<f64>) -> Result<Self> {
        ensure(!values.is_empty(), || "prior needs at least one atom".into())?;
        ensure(values.len() == probs.len(), || format!("{} atoms but {} probabilities", values.len(), probs.len()))?;
        let dim = values[0].len();
        ensure(dim >= 1, || "atom values must be non-empty".into())?;
        for v in &values {
            if v.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "atom of length {} in a prior of dimension {dim}",
                    v.len()
                )));
            }
            ensure(v.iter().all(|x| x.is_finite()), || "atom values must be finite".into())?;
        }
        for i in 0..values.len() {
            for j in 0..i {
                ensure(values[i] != values[j], || format!("duplicate atom {:?}", values[i]))?;
            }
        }
        ensure(probs.iter().all(|p| p.is_finite() && *p >= 0.0), || {
            "probabilities must be finite and non-negative".into()
        })?;
        let total: f64 = probs.iter().sum();
        ensure((total - 1.0).abs() <= MASS_TOL, || format!("probabilities sum to {total}, not 1"))?;
        let probs = probs.iter().map(|p| p / total).collect();
        Ok(Self { values, probs })
    }

    pub fn scalar(values: &[f64], probs: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| vec![v]).collect(), probs.to_vec())
    }

    pub fn point_mass(value: Vec<f64>) -> Result<Self> {
        Self::new(vec![value], vec![1.0])
    }

    /// Same support as `self`, new probabilities.
    pub fn with_probs(&self, probs: Vec<f64>) -> Result<Self> {
        Self::new(self.values.clone(), probs)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// First coordinate of every atom; the natural view of a scalar prior.
    pub fn scalar_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| v[0]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (v, p) in self.values.iter().zip(&self.probs) {
            for (mj, vj) in m.iter_mut().zip(v) {
                *mj += p * vj;
            }
        }
        m
    }

    pub fn same_support(&self, other: &FinitePrior) -> bool {
        self.values == other.values
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // rounding left u above the cumulative total; take the last charged atom
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct GaussianPrior {
    mu0: Vec<f64>,
    sigma0: f64,
}

impl GaussianPrior {
    /// Isotropic `N(mu0, sigma0^2 I)`.
    pub fn new(mu0: Vec<f64>, sigma0: f64) -> Result<Self> {
        ensure(!mu0.is_empty(), || "Gaussian mean must be non-empty".into())?;
        ensure(mu0.iter().all(|m| m.is_finite()), || "Gaussian mean must be finite".into())?;
        ensure(sigma0.is_finite() && sigma0 > 0.0, || format!("prior std must be positive, got {sigma0}"))?;
        Ok(Self { mu0, sigma0 })
    }

    pub fn scalar(mu0: f64, sigma0: f64) -> Result<Self> {
        Self::new(vec![mu0], sigma0)
    }

    pub fn mu0(&self) -> &[f64] {
        &self.mu0
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prior {
    Finite(FinitePrior),
    Gaussian(GaussianPrior),
}

impl Prior {
    pub fn dim(&self) -> usize {
        match self {
            Prior::Finite(p) => p.dim(),
            Prior::Gaussian(g) => g.dim(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            Prior::Finite(p) => p.mean(),
            Prior::Gaussian(g) => g.mu0.clone(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Prior::Finite(p) => p.values[p.sample_index(rng)].clone(),
            Prior::Gaussian(g) => g
                .mu0
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + g.sigma0 * z
                })
                .collect(),
        }
    }
}

impl From<FinitePrior> for Prior {
    fn from(p: FinitePrior) -> Self {
        Prior::Finite(p)
    }
}

impl From<GaussianPrior> for Prior {
    fn from(g: GaussianPrior) -> Self {
        Prior::Gaussian(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    Kl,
    CressieRead { k: f64 },
}

/// Radius and divergence of an ambiguity ball around the prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiusSpec {
    pub delta: f64,
    pub divergence: Divergence,
}

impl RadiusSpec {
    pub fn new(delta: f64, divergence: Divergence) -> Result<Self> {
        ensure(delta.is_finite() && delta >= 0.0, || format!("radius must be non-negative, got {delta}"))?;
        if let Divergence::CressieRead { k } = divergence {
            ensure(k > 1.0, || format!("Cressie-Read order must exceed 1, got {k}"))?;
        }
        Ok(Self { delta, divergence })
    }

    pub fn kl(delta: f64) -> Result<Self> {
        Self::new(delta, Divergence::Kl)
    }
}

/// `n` i.i.d. draws, deterministic in `seed`.
pub fn sample_prior(prior: &Prior, seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut rng: SimRng = rng_from_seed(seed);
    (0..n).map(|_| prior.sample(&mut rng)).collect()
}

/// `KL(q || p)`; infinite when `q` charges an atom that `p` does not.
pub fn kl_finite(q: &FinitePrior, p: &FinitePrior) -> Result<f64> {
    if !q.same_support(p) {
        return Err(Error::SupportMismatch);
    }
    let mut kl = 0.0;
    for (&qi, &pi) in q.probs.iter().zip(&p.probs) {
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return Ok(f64::INFINITY);
        }
        kl += qi * (qi / pi).ln();
    }
    // non-negative in exact arithmetic; drop rounding noise around zero
    Ok(kl.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiltSense {
    /// Adversary minimizes the mean score.
    Min,
    /// Adversary maximizes the mean score.
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiltResult {
    pub q: FinitePrior,
    /// Tilt exponent, `q_i ∝ p_i exp(-alpha s_i)` with `s = score` for `Min`
    /// and `s = -score` for `Max`. Infinite when saturated.
    pub alpha: f64,
    pub worst_mean: f64,
    /// The ball contains the point mass on the extreme score.
    pub saturated: bool,
    /// All charged scores are equal; `q = p`.
    pub degenerate: bool,
}

/// Scores oriented so that the adversary minimizes, plus support statistics.
struct Oriented {
    s: Vec<f64>,
    smin: f64,
    smax: f64,
    /// `P(argmin s)`
    argmin_mass: f64,
}

fn orient(p: &FinitePrior, scores: &[f64], delta: f64, sense: TiltSense) -> Result<Oriented> {
    if scores.len() != p.len() {
        return Err(Error::DimensionMismatch(format!("{} scores for {} atoms", scores.len(), p.len())));
    }
    ensure(scores.iter().all(|s| s.is_finite()), || "scores must be finite".into())?;
    ensure(delta.is_finite() && delta >= 0.0, || format!("radius must be non-negative, got {delta}"))?;
    let s: Vec<f64> = match sense {
        TiltSense::Min => scores.to_vec(),
        TiltSense::Max => scores.iter().map(|v| -v).collect(),
    };
    let charged = || s.iter().zip(&p.probs).filter(|(_, &pi)| pi > 0.0).map(|(&si, _)| si);
    let smin = charged().fold(f64::INFINITY, f64::min);
    let smax = charged().fold(f64::NEG_INFINITY, f64::max);
    let argmin_mass = s.iter().zip(&p.probs).filter(|(&si, &pi)| pi > 0.0 && si == smin).map(|(_, &pi)| pi).sum();
    Ok(Oriented { s, smin, smax, argmin_mass })
}

/// `q(alpha)` and `KL(q(alpha) || p)`, computed from log-weights
/// `log p_i - alpha (s_i - smin) <= log p_i` so nothing overflows.
fn tilted(p: &[f64], s: &[f64], smin: f64, alpha: f64) -> (Vec<f64>, f64) {
    let lw: Vec<f64> = p
        .iter()
        .zip(s)
        .map(|(&pi, &si)| if pi > 0.0 { pi.ln() - alpha * (si - smin) } else { f64::NEG_INFINITY })
        .collect();
    let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = m + lw.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let q: Vec<f64> = lw.iter().map(|l| (l - log_z).exp()).collect();
    let mean_shift: f64 = q.iter().zip(s).filter(|(&qi, _)| qi > 0.0).map(|(qi, si)| qi * (si - smin)).sum();
    let kl = -alpha * mean_shift - log_z;
    (q, kl.max(0.0))
}

fn saturated_q(p: &FinitePrior, o: &Oriented) -> Vec<f64> {
    p.probs.iter().zip(&o.s).map(|(&pi, &si)| if pi > 0.0 && si == o.smin { pi / o.argmin_mass } else { 0.0 }).collect()
}

fn mean_of(q: &[f64], scores: &[f64]) -> f64 {
    q.iter().zip(scores).map(|(a, b)| a * b).sum()
}

/// Worst-case mean score over `{q : KL(q || p) <= delta}` by exponential tilting.
///
/// Equal scores on the support are reported through `degenerate` rather than
/// an error, since the mean is then the answer for every radius.
pub fn tilt_worst_mean(p: &FinitePrior, scores: &[f64], delta: f64, sense: TiltSense) -> Result<TiltResult> {
    let o = orient(p, scores, delta, sense)?;
    let base_mean = mean_of(&p.probs, scores);
    if o.smax - o.smin <= 0.0 {
        return Ok(TiltResult { q: p.clone(), alpha: 0.0, worst_mean: base_mean, saturated: false, degenerate: true });
    }
    if delta == 0.0 {
        return Ok(TiltResult { q: p.clone(), alpha: 0.0, worst_mean: base_mean, saturated: false, degenerate: false });
    }
    if delta >= -o.argmin_mass.ln() {
        let q = saturated_q(p, &o);
        let worst_mean = mean_of(&q, scores);
        return Ok(TiltResult {
            q: p.with_probs(q)?,
            alpha: f64::INFINITY,
            worst_mean,
            saturated: true,
            degenerate: false,
        });
    }

    let kl_at = |alpha: f64| tilted(&p.probs, &o.s, o.smin, alpha).1;
    let mut lo = 0.0;
    let mut hi = 1.0 / (o.smax - o.smin);
    // KL(alpha) increases to -log P(argmin) > delta, so this terminates
    while kl_at(hi) < delta {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let k = kl_at(mid);
        if (k - delta).abs() <= 1e-10 {
            lo = mid;
            break;
        }
        if k < delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (q, _) = tilted(&p.probs, &o.s, o.smin, lo);
    let worst_mean = mean_of(&q, scores);
    Ok(TiltResult { q: p.with_probs(q)?, alpha: lo, worst_mean, saturated: false, degenerate: false })
}

/// Exact `inf { sum q_i s_i : KL(q || p) <= delta }`.
///
/// Solves the active KL constraint with a safeguarded Newton iteration on the
/// tilt exponent (`dKL/dalpha = alpha Var_q(s)`), independently of the
/// bisection in [`tilt_worst_mean`]; the two are cross-checked in tests.
pub fn primal_inner_inf(p: &FinitePrior, scores: &[f64], delta: f64) -> Result<f64> {
    let o = orient(p, scores, delta, TiltSense::Min)?;
    if o.smax - o.smin <= 0.0 || delta == 0.0 {
        return Ok(mean_of(&p.probs, scores));
    }
    if delta >= -o.argmin_mass.ln() {
        return Ok(o.smin);
    }
    let var_p = {
        let m = mean_of(&p.probs, &o.s);
        p.probs.iter().zip(&o.s).map(|(pi, si)| pi * (si - m).powi(2)).sum::<f64>()
    };
    // small-radius expansion KL ≈ alpha^2 Var_p / 2
    let mut alpha = (2.0 * delta / var_p).sqrt();
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    for _ in 0..500 {
        let (q, kl) = tilted(&p.probs, &o.s, o.smin, alpha);
        let f = kl - delta;
        if f.abs() <= 1e-13 * delta.max(1.0) {
            break;
        }
        if f < 0.0 {
            lo = alpha;
        } else {
            hi = alpha;
        }
        let mq = mean_of(&q, &o.s);
        let var_q: f64 = q.iter().zip(&o.s).map(|(qi, si)| qi * (si - mq).powi(2)).sum();
        let slope = alpha * var_q;
        let mut next = if slope > 0.0 { alpha - f / slope } else { f64::NAN };
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * alpha.max(lo) };
        }
        if hi.is_finite() && hi - lo <= 1e-15 * hi {
            break;
        }
        alpha = next;
    }
    let (q, _) = tilted(&p.probs, &o.s, o.smin, alpha);
    Ok(mean_of(&q, scores))
}

/// `inf { sum q_i s_i : D_k(q || p) <= delta }` for the Cressie–Read divergence
/// `D_k(q || p) = sum p_i f_k(q_i / p_i)`, `f_k(x) = (x^k - k x + k - 1) / (k (k - 1))`.
///
/// Solved through the KKT conditions: for a multiplier `eta > 0` on the
/// divergence, `q_i / p_i = (1 + (k - 1)(u - s_i) / eta)_+^{1/(k-1)}` with `u`
/// fixing the total mass. Both `u` and `eta` are found by bisection.
pub fn cressie_read_primal_inf(p: &FinitePrior, scores: &[f64], k: f64, delta: f64) -> Result<f64> {
    ensure(k > 1.0, || format!("Cressie-Read order must exceed 1, got {k}"))?;
    let o = orient(p, scores, delta, TiltSense::Min)?;
    if o.smax - o.smin <= 0.0 || delta == 0.0 {
        return Ok(mean_of(&p.probs, scores));
    }
    let f_k = |x: f64| (x.powf(k) - k * x + k - 1.0) / (k * (k - 1.0));
    let div = |ratio: &[f64]| -> f64 { p.probs.iter().zip(ratio).map(|(pi, x)| pi * f_k(*x)).sum() };
    let sat: Vec<f64> =
        saturated_q(p, &o).iter().zip(&p.probs).map(|(q, pi)| if *pi > 0.0 { q / pi } else { 0.0 }).collect();
    if delta >= div(&sat) {
        return Ok(o.smin);
    }

    let ratios = |eta: f64| -> Vec<f64> {
        let x_of = |u: f64| -> Vec<f64> {
            o.s.iter().map(|si| (1.0 + (k - 1.0) * (u - si) / eta).max(0.0).powf(1.0 / (k - 1.0))).collect()
        };
        let mass = |x: &[f64]| -> f64 { p.probs.iter().zip(x).map(|(a, b)| a * b).sum() };
        let (mut lo, mut hi) = (o.smin - eta / (k - 1.0), o.smax);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mass(&x_of(mid)) < 1.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = x_of(0.5 * (lo + hi));
        let m = mass(&x);
        x.iter().map(|v| v / m).collect()
    };

    // divergence decreases in eta; bisect on log eta
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if div(&ratios(mid.exp())) > delta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = ratios(hi.exp());
    Ok(p.probs.iter().zip(&x).zip(scores).map(|((pi, xi), si)| pi * xi * si).sum())
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum AtomValue {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl AtomValue {
    fn into_vec(self) -> Vec<f64> {
        match self {
            AtomValue::Scalar(v) => vec![v],
            AtomValue::Vector(v) => v,
        }
    }

    fn from_vec(v: Vec<f64>) -> Self {
        if v.len() == 1 {
            AtomValue::Scalar(v[0])
        } else {
            AtomValue::Vector(v)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AtomRepr {
    b: AtomValue,
    p: f64,
}

#[derive(Serialize, Deserialize)]
struct FiniteRepr {
    atoms: Vec<AtomRepr>,
}

impl TryFrom<FiniteRepr> for FinitePrior {
    type Error = Error;
    fn try_from(r: FiniteRepr) -> Result<Self> {
        let (values, probs) = r.atoms.into_iter().map(|a| (a.b.into_vec(), a.p)).unzip();
        FinitePrior::new(values, probs)
    }
}

impl From<FinitePrior> for FiniteRepr {
    fn from(f: FinitePrior) -> Self {
        FiniteRepr {
            atoms: f.values.into_iter().zip(f.probs).map(|(b, p)| AtomRepr { b: AtomValue::from_vec(b), p }).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GaussianInner {
    mu0: AtomValue,
    sigma0: f64,
}

#[derive(Serialize, Deserialize)]
struct GaussianRepr {
    gaussian: GaussianInner,
}

impl TryFrom<GaussianRepr> for GaussianPrior {
    type Error = Error;
    fn try_from(r: GaussianRepr) -> Result<Self> {
        GaussianPrior::new(r.gaussian.mu0.into_vec(), r.gaussian.sigma0)
    }
}

impl From<GaussianPrior> for GaussianRepr {
    fn from(g: GaussianPrior) -> Self {
        GaussianRepr { gaussian: GaussianInner { mu0: AtomValue::from_vec(g.mu0), sigma0: g.sigma0 } }
    }
}
