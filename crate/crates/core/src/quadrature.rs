//! Gauss–Hermite rules for expectations against centered normal laws.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Default number of nodes for the Merton integrals.
pub const DEFAULT_NODES: usize = 64;

/// Nodes and weights for `E[f(Z)]`, `Z ~ N(0, 1)`; rescale with [`Self::expect`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

/// Orthonormal Hermite polynomials for the standard normal law at `x`:
/// returns `(p_{n-1}(x), p_n(x), sum_{k<n} p_k(x)^2)`.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64, f64) {
    let (mut prev, mut cur) = (0.0, 1.0);
    let mut sum_sq = 0.0;
    for k in 0..n {
        sum_sq += cur * cur;
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (prev, cur, sum_sq)
}

impl QuadratureRule {
    /// `n`-point rule exact for polynomials of degree `2n - 1`.
    ///
    /// Nodes are the eigenvalues of the Jacobi matrix, polished by Newton steps
    /// on `p_n`; weights are the Christoffel numbers `1 / sum_k p_k(x_i)^2`,
    /// which keeps tail weights accurate in relative terms.
    pub fn gauss_hermite(n: usize) -> Self {
        assert!(n >= 1, "quadrature needs at least one node");
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64).sqrt();
            jacobi[(k - 1, k)] = b;
            jacobi[(k, k - 1)] = b;
        }
        let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        nodes.sort_by(|a, b| a.total_cmp(b));
        for x in nodes.iter_mut() {
            for _ in 0..3 {
                let (pm1, pn, _) = orthonormal_hermite(n, *x);
                let deriv = (n as f64).sqrt() * pm1;
                if deriv != 0.0 {
                    *x -= pn / deriv;
                }
            }
        }
        // enforce the exact symmetry of the rule
        for i in 0..n / 2 {
            let a = 0.5 * (nodes[n - 1 - i] - nodes[i]);
            nodes[i] = -a;
            nodes[n - 1 - i] = a;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        let mut weights: Vec<f64> = nodes.iter().map(|&x| 1.0 / orthonormal_hermite(n, x).2).collect();
        for i in 0..n / 2 {
            let w = 0.5 * (weights[i] + weights[n - 1 - i]);
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `E[f(Z)]` for `Z ~ N(0, s)`.
    pub fn expect<F: Fn(f64) -> f64>(&self, s: f64, f: F) -> f64 {
        let sd = s.max(0.0).sqrt();
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(sd * x)).sum()
    }

    /// `log E[exp(g(Z))]` for `Z ~ N(0, s)`, with the largest term factored out.
    pub fn log_expect_exp<G: Fn(f64) -> f64>(&self, s: f64, g: G) -> f64 {
        let sd = s.max(0.0).sqrt();
        let logs: Vec<f64> = self.nodes.iter().zip(&self.weights).map(|(x, w)| w.ln() + g(sd * x)).collect();
        log_sum_exp(&logs)
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::gauss_hermite(DEFAULT_NODES)
    }
}

/// `log sum exp(v_i)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
