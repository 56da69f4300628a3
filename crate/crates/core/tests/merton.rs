use drbc_core::merton::{
    bayes_fraction, bayes_value, closed_form_coeffs, closed_form_conditional_utility, closed_form_utility_mc,
    drbc_finite_learn, drbc_finite_solve, drc_fraction, f_mixture, sharpe_and_utility, ClosedFormParams,
    FractionPolicy, LearnSchedule, MertonMarket,
};
use drbc_core::priors::{kl_finite, FinitePrior};
use drbc_core::quadrature::QuadratureRule;
use drbc_core::rng::{derive_seed, rng_from_seed};
use drbc_core::sde::{make_noise, simulate_wealth, simulate_wealth_terminal, FractionRule};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn market() -> MertonMarket {
    MertonMarket::new(0.05, 0.4, 1.0, 1.0, 0.5, 100).unwrap()
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn mixture_matches_direct_summation() {
    let m = market();
    let prior = FinitePrior::scalar(&[-0.1, 0.3], &[0.35, 0.65]).unwrap();
    let mut rng = rng_from_seed(11);
    for _ in 0..200 {
        let t = rng.random_range(0.0..1.0);
        let y = rng.random_range(-3.0..3.0);
        let (f, df) = f_mixture(t, y, &prior, &m);
        let (mut fd, mut dfd) = (0.0, 0.0);
        for (b, p) in prior.scalar_values().iter().zip(prior.probs()) {
            let nu = (b - m.r) / m.sigma;
            let l = (nu * y - 0.5 * nu * nu * t).exp();
            fd += p * l;
            dfd += p * nu * l;
        }
        assert!((f - fd).abs() <= 1e-12 * fd.max(1.0));
        assert!((df - dfd).abs() <= 1e-12 * dfd.abs().max(1.0));
    }
}

/// Monte Carlo of the two integrals in the Bayes fraction, with a
/// delta-method standard error for their ratio.
fn fraction_mc(t: f64, y: f64, prior: &FinitePrior, m: &MertonMarket, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = rng_from_seed(seed);
    let s = (m.horizon() - t).sqrt();
    let k = 1.0 / (1.0 - m.alpha);
    let (mut a, mut b) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        let (f, df) = f_mixture(m.horizon(), s * z + y, prior, m);
        a.push(df * f.powf(m.alpha * k));
        b.push(f.powf(k));
    }
    let (ma, sa) = mean_se(&a);
    let (mb, sb) = mean_se(&b);
    let nf = n as f64;
    let cov = a.iter().zip(&b).map(|(x, w)| (x - ma) * (w - mb)).sum::<f64>() / (nf - 1.0) / nf;
    let scale = (1.0 - m.alpha) * m.sigma;
    let ratio = ma / mb / scale;
    let var = (sa * sa / (mb * mb) + ma * ma * sb * sb / mb.powi(4) - 2.0 * ma * cov / mb.powi(3)) / (scale * scale);
    (ratio, var.max(0.0).sqrt())
}

#[test]
fn bayes_fraction_matches_monte_carlo() {
    let m = market();
    let quad = QuadratureRule::default();
    let prior = FinitePrior::scalar(&[0.0, 0.25], &[0.5, 0.5]).unwrap();
    for (i, (t, y)) in [(0.0, 0.0), (0.4, 0.7), (0.8, -0.5)].into_iter().enumerate() {
        let q = bayes_fraction(t, y, &prior, &m, &quad).unwrap();
        let (mc, se) = fraction_mc(t, y, &prior, &m, 1_000_000, 40 + i as u64);
        assert!((q - mc).abs() < 4.0 * se, "({t},{y}): {q} vs {mc} (se {se})");
    }
}

#[test]
fn bayes_value_matches_monte_carlo() {
    let m = market();
    let quad = QuadratureRule::default();
    let prior = FinitePrior::scalar(&[0.01, 0.46, 0.30, 0.21, 0.27], &[0.05, 0.35, 0.35, 0.15, 0.1]).unwrap();
    let v = bayes_value(&prior, &m, &quad).unwrap();
    let mut rng = rng_from_seed(5);
    let k = 1.0 / (1.0 - m.alpha);
    let draws: Vec<f64> = (0..1_000_000)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            f_mixture(m.horizon(), m.horizon().sqrt() * z, &prior, &m).0.powf(k)
        })
        .collect();
    let (mi, si) = mean_se(&draws);
    let lead = (m.x0 * (m.r * m.horizon()).exp()).powf(m.alpha) / m.alpha;
    let mc = lead * mi.powf(1.0 - m.alpha);
    // delta method for x -> x^{1-alpha}
    let se = lead * (1.0 - m.alpha) * mi.powf(-m.alpha) * si;
    assert!((v - mc).abs() < 4.0 * se, "{v} vs {mc} (se {se})");
}

#[test]
fn bayes_value_matches_simulated_bayes_policy() {
    // the value is the expected utility of the Bayes policy under the prior
    let m = market();
    let quad = QuadratureRule::default();
    let prior = FinitePrior::scalar(&[0.0, 0.3], &[0.5, 0.5]).unwrap();
    let v = bayes_value(&prior, &m, &quad).unwrap();
    let policy = FractionPolicy::bayesian(&prior, &m, &quad).unwrap();
    let fine = m.with_steps(400).unwrap();
    let utils: Vec<f64> = (0..20_000u64)
        .map(|i| {
            let mut rng = rng_from_seed(derive_seed(9, i));
            let b = prior.scalar_values()[prior.sample_index(&mut rng)];
            m.utility(simulate_wealth_terminal(&fine, b, &policy, &mut rng).unwrap())
        })
        .collect();
    let (mc, se) = mean_se(&utils);
    assert!((v - mc).abs() < 4.0 * se + 2e-3, "{v} vs {mc} (se {se})");
}

#[test]
fn widening_a_symmetric_prior_adds_value() {
    let m = market();
    let quad = QuadratureRule::default();
    let mut last = f64::NEG_INFINITY;
    for eps in [0.01, 0.05, 0.1, 0.2, 0.4] {
        let prior = FinitePrior::scalar(&[m.r - eps, m.r + eps], &[0.5, 0.5]).unwrap();
        let v = bayes_value(&prior, &m, &quad).unwrap();
        assert!(v >= last - 1e-12);
        last = v;
    }
}

#[test]
fn wealth_simulation_matches_finer_grid() {
    let m = market();
    let policy = |_t: f64, _y: f64| 0.625;
    let utilities = |mk: &MertonMarket, seed: u64| -> Vec<f64> {
        (0..100_000u64)
            .map(|i| {
                let mut rng = rng_from_seed(derive_seed(seed, i));
                mk.utility(simulate_wealth_terminal(mk, 0.1, &policy, &mut rng).unwrap())
            })
            .collect()
    };
    let (coarse, se_c) = mean_se(&utilities(&m, 1));
    let (fine, se_f) = mean_se(&utilities(&m.with_steps(1000).unwrap(), 2));
    assert!((coarse - fine).abs() < 3.0 * (se_c * se_c + se_f * se_f).sqrt());
    // lognormal terminal wealth: E[2 sqrt(X_T)]
    let pi = 0.625;
    let mu = m.r + pi * (0.1 - m.r) - 0.5 * pi * pi * m.sigma * m.sigma;
    let exact = 2.0 * (0.5 * mu + pi * pi * m.sigma * m.sigma / 8.0).exp();
    assert!((fine - exact).abs() < 4.0 * se_f + 1e-3);
}

#[test]
fn noise_block_and_streaming_simulation_agree() {
    let m = market();
    let noise = make_noise(3, m.grid, 1);
    let policy = |t: f64, y: f64| 0.3 + 0.1 * t - 0.05 * y;
    let path = simulate_wealth(&m, 0.2, &policy, &noise).unwrap();
    let mut rng = rng_from_seed(3);
    let x = simulate_wealth_terminal(&m, 0.2, &policy, &mut rng).unwrap();
    assert!((path.terminal() - x).abs() <= 1e-12 * x);
    assert_eq!(policy.fraction(0.0, 0.0), 0.3);
}

#[test]
fn drc_fraction_decreases_with_radius() {
    let m = market();
    let prior = FinitePrior::scalar(&[0.06, 0.1, 0.2, 0.35], &[0.1, 0.4, 0.3, 0.2]).unwrap();
    let mut last = f64::INFINITY;
    for delta in [0.0, 0.01, 0.05, 0.1, 0.5, 1.0, 3.0] {
        let f = drc_fraction(&prior, &m, delta).unwrap();
        assert!(f <= last + 1e-12);
        last = f;
    }
    assert!((last - m.merton_fraction(0.06)).abs() < 1e-12);
}

fn h4_prior() -> FinitePrior {
    FinitePrior::scalar(&[0.01, 0.46, 0.30, 0.21, 0.27], &[0.05, 0.35, 0.35, 0.15, 0.1]).unwrap()
}

#[test]
fn finite_learning_beats_simplex_grid_neighbours() {
    let m = market();
    let quad = QuadratureRule::gauss_hermite(32);
    let prior = FinitePrior::scalar(&[0.0, 0.2, 0.4], &[0.3, 0.4, 0.3]).unwrap();
    let lambda = 0.5;
    let res = drbc_finite_learn(&prior, &m, lambda, &LearnSchedule::default(), &quad).unwrap();
    let objective = |q: &[f64]| {
        let qp = prior.with_probs(q.to_vec()).unwrap();
        bayes_value(&qp, &m, &quad).unwrap() + lambda * kl_finite(&qp, &prior).unwrap()
    };
    assert!(res.penalized_value <= objective(prior.probs()) + 1e-12);
    let q = res.q.probs().to_vec();
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            let mut nb = q.clone();
            nb[i] += 0.01;
            nb[j] -= 0.01;
            if nb[j] > 0.0 {
                assert!(res.penalized_value <= objective(&nb) + 1e-10);
            }
        }
    }
    assert!(res.history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn finite_learning_limits() {
    let m = market();
    let quad = QuadratureRule::gauss_hermite(32);
    let prior = FinitePrior::scalar(&[0.1, 0.3], &[0.5, 0.5]).unwrap();
    let big = drbc_finite_learn(&prior, &m, 1e6, &LearnSchedule::default(), &quad).unwrap();
    assert!((big.q.probs()[0] - 0.5).abs() < 1e-4);

    // small lambda: grid search over the segment
    let lambda = 1e-3;
    let small = drbc_finite_learn(&prior, &m, lambda, &LearnSchedule::default(), &quad).unwrap();
    let objective = |t: f64| {
        let qp = prior.with_probs(vec![1.0 - t, t]).unwrap();
        bayes_value(&qp, &m, &quad).unwrap() + lambda * kl_finite(&qp, &prior).unwrap()
    };
    let (best_t, best) = (1..1000)
        .map(|i| i as f64 / 1000.0)
        .map(|t| (t, objective(t)))
        .fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    assert!(small.penalized_value <= best + 1e-9);
    assert!((small.q.probs()[1] - best_t).abs() < 2e-3);
    // both drifts exceed r: mass moves to the atom with the lower point-mass value
    assert!(small.q.probs()[0] > 0.95);
}

#[test]
fn alternation_produces_a_robust_policy() {
    let m = market();
    let quad = QuadratureRule::gauss_hermite(32);
    let prior = h4_prior();
    let sol = drbc_finite_solve(&prior, &m, 0.05, &LearnSchedule::default(), &quad).unwrap();
    assert!(sol.converged);
    assert!(kl_finite(&sol.q, &prior).unwrap() > 0.0);
    // the tilted prior is more pessimistic than the base prior
    assert!(sol.q.mean()[0] < prior.mean()[0]);
    assert!(sol.robust_value < bayes_value(&prior, &m, &quad).unwrap());
}

fn closed_form_sets() -> Vec<(MertonMarket, ClosedFormParams, f64)> {
    let h1 = ClosedFormParams { gamma: 0.5, sigma0: 2.0, b0: 0.1, mu0: 0.1 };
    vec![
        (MertonMarket::new(0.05, 0.4, 1.0, 1.0, 0.5, 1).unwrap(), h1, 0.1),
        (MertonMarket::new(0.05, 0.4, 1.0, 1.0, 0.5, 1).unwrap(), h1, 0.3),
        (MertonMarket::new(0.1, 0.4, 1.0, 1.0, 0.5, 1).unwrap(), h1, 0.1),
        (
            MertonMarket::new(0.03, 0.3, 2.0, 1.5, 0.3, 1).unwrap(),
            ClosedFormParams { gamma: 0.4, sigma0: 0.5, b0: 0.08, mu0: 0.06 },
            0.12,
        ),
        (
            MertonMarket::new(0.02, 0.25, 0.5, 1.0, 0.4, 1).unwrap(),
            ClosedFormParams { gamma: 0.7, sigma0: 1.0, b0: 0.05, mu0: 0.1 },
            0.0,
        ),
    ]
}

#[test]
fn closed_form_utility_matches_monte_carlo() {
    for (i, (m, params, b)) in closed_form_sets().into_iter().enumerate() {
        let exact = closed_form_conditional_utility(b, &m, &params).unwrap();
        let (mc, se) = closed_form_utility_mc(b, &m, &params, 1_000_000, 70 + i as u64).unwrap();
        assert!((exact - mc).abs() < 4.0 * se, "set {i}: {exact} vs {mc} (se {se})");
    }
}

#[test]
fn closed_form_coefficients_match_transcription() {
    // independent transcription of the coefficient system
    for (m, pr, _) in closed_form_sets() {
        let (a, s2, g) = (m.alpha, pr.sigma0 * pr.sigma0, pr.gamma);
        let root =
            (s2.powi(2) + (2.0 - 4.0 * a) / (1.0 - a) * s2 + (1.0 - a).powi(-2) - 4.0 * a * g / (1.0 - a)).sqrt();
        let p = (1.0 / (1.0 - a) + s2 - root) / (2.0 * (s2 + g));
        let nu = (pr.b0 - m.r) / m.sigma;
        let q = a * (1.0 - p) * nu / ((1.0 - a) * (1.0 - g * p));
        let t = m.horizon();
        let c = a * (m.x0.ln() + m.r * t + (nu * nu - (nu - q / a).powi(2) / (1.0 - p / a)) * t / 2.0);
        let got = closed_form_coeffs(&m, &pr).unwrap();
        assert!((got.p - p).abs() < 1e-10 && (got.q - q).abs() < 1e-10 && (got.c - c).abs() < 1e-10);
    }
}

#[test]
fn sharpe_of_merton_policy_is_positive() {
    let m = market();
    let policy = FractionPolicy::constant(m.merton_fraction(0.2));
    let terminals: Vec<f64> = (0..2000u64)
        .map(|i| simulate_wealth_terminal(&m, 0.2, &policy, &mut rng_from_seed(derive_seed(1, i))).unwrap())
        .collect();
    let perf = sharpe_and_utility(&terminals, &m).unwrap();
    assert!(perf.sharpe > 0.0 && perf.mean_utility > 2.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn point_mass_fraction_is_constant(b in -0.2f64..0.5, t in 0.0f64..0.95, y in -3.0f64..3.0) {
        let m = market();
        let quad = QuadratureRule::default();
        let prior = FinitePrior::point_mass(vec![b]).unwrap();
        let f = bayes_fraction(t, y, &prior, &m, &quad).unwrap();
        prop_assert!((f - m.merton_fraction(b)).abs() < 1e-8);
    }

    #[test]
    fn bayes_fraction_lies_between_atom_fractions(b1 in -0.2f64..0.5, b2 in -0.2f64..0.5, w in 0.05f64..0.95, t in 0.0f64..0.95, y in -2.0f64..2.0) {
        let m = market();
        let quad = QuadratureRule::default();
        let prior = FinitePrior::scalar(&[b1, b2], &[w, 1.0 - w]).unwrap();
        let f = bayes_fraction(t, y, &prior, &m, &quad).unwrap();
        let (lo, hi) = (m.merton_fraction(b1.min(b2)), m.merton_fraction(b1.max(b2)));
        prop_assert!(f >= lo - 1e-9 && f <= hi + 1e-9);
    }
}
