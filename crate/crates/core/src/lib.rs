//! Distributionally robust Bayesian control.
//!
//! The controller keeps a prior over an unknown model parameter and hedges
//! against every prior within a divergence ball around it. This crate provides
//! the simulators, the dual estimators used to evaluate policies robustly, and
//! the two worked problem classes: Merton portfolio choice with an unknown
//! drift and linear–quadratic control with an unknown drift matrix.

pub mod dual;
pub mod error;
pub mod lq;
pub mod merton;
pub mod priors;
pub mod quadrature;
pub mod rng;
pub mod sde;

pub use dual::{
    cressie_read_dual, evaluate_policy_kl, kl_dual_objective, lambda_upper_bound, maximize_kl_dual, rmlmc_derivative,
    rmlmc_estimate_m, rmlmc_single, AscentConfig, BatchMode, DualEvalResult, DualOracle, ExactFiniteOracle, ExactInner,
    InnerSimulator, RmlmcBatch, RmlmcOracle, RmlmcParams,
};
pub use error::{Error, Result};
pub use lq::{
    drbc_lq_learn, gls_estimate, lq_reward, plugin_controller, riccati_solve, BeliefFeatures, LqBenchmark,
    LqLearnConfig, LqModel, LqPolicy, RiccatiSolution,
};
pub use merton::{
    bayes_fraction, bayes_value, closed_form_conditional_utility, closed_form_terminal_wealth, drbc_finite_learn,
    drbc_finite_solve, drc_fraction, f_mixture, sharpe_and_utility, ClosedFormParams, FractionPolicy, LearnSchedule,
    MertonMarket, Performance,
};
pub use priors::{
    kl_finite, primal_inner_inf, sample_prior, tilt_worst_mean, Divergence, FinitePrior, GaussianPrior, Prior,
    RadiusSpec, TiltSense,
};
pub use quadrature::QuadratureRule;
pub use rng::{derive_seed, rng_from_seed, SimRng};
pub use sde::{
    make_noise, price_to_y, simulate_lq, simulate_wealth, FractionRule, LqTrajectory, NoiseBlock, TimeGrid, WealthPath,
};
