//! Gaussian expectations of payoffs of a lognormal variable.
//!
//! Everything reduces to integrals of the form `E[g(U)]` and `E[g(U) U]` for
//! a standard normal `U`. Smooth integrands use Gauss-Hermite nodes;
//! integrands with jumps are split at the jumps and each panel uses
//! Gauss-Legendre nodes, or the exact Gaussian integrals when the payoff is
//! constant on the panel. The domain is truncated at a configurable number of
//! standard deviations.

use crate::stats::{normal_cdf, normal_pdf};
use nalgebra::DMatrix;
use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_NODES: usize = 256;
pub const DEFAULT_TRUNCATION: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadratureError {
    #[error("node count must be at least 2, got {0}")]
    TooFewNodes(usize),
    #[error("truncation width must be positive, got {0}")]
    BadTruncation(f64),
}

/// A terminal payoff `f(z)` on `(0, inf)`.
pub trait Payoff: Send + Sync {
    fn value(&self, z: f64) -> f64;

    /// Ascending points where the payoff may be discontinuous.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }

    /// The payoff's value on the open interval `(lo, hi)` if it is constant
    /// there.
    fn constant_on(&self, _lo: f64, _hi: f64) -> Option<f64> {
        None
    }
}

/// Adapter turning a closure into a continuous [`Payoff`].
pub struct FnPayoff<F>(pub F);

impl<F: Fn(f64) -> f64 + Send + Sync> Payoff for FnPayoff<F> {
    fn value(&self, z: f64) -> f64 {
        (self.0)(z)
    }
}

impl<P: Payoff + ?Sized> Payoff for Arc<P> {
    fn value(&self, z: f64) -> f64 {
        (**self).value(z)
    }
    fn breakpoints(&self) -> Vec<f64> {
        (**self).breakpoints()
    }
    fn constant_on(&self, lo: f64, hi: f64) -> Option<f64> {
        (**self).constant_on(lo, hi)
    }
}

impl<P: Payoff + ?Sized> Payoff for &P {
    fn value(&self, z: f64) -> f64 {
        (**self).value(z)
    }
    fn breakpoints(&self) -> Vec<f64> {
        (**self).breakpoints()
    }
    fn constant_on(&self, lo: f64, hi: f64) -> Option<f64> {
        (**self).constant_on(lo, hi)
    }
}

/// Nodes and weights of an interpolatory rule.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussRule {
    /// Gauss-Hermite rule for the standard normal weight: `E[g(U)] ~ sum w g(x)`.
    pub fn hermite(n: usize) -> Self {
        // Eigenvalues of the Jacobi matrix (Golub-Welsch) as starting points,
        // polished by Newton on orthonormal Hermite polynomials for the weight
        // exp(-x^2), then rescaled to the normal density.
        const PIM4: f64 = 0.751_125_544_464_942_5;
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let mut guesses: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
        guesses.sort_by(f64::total_cmp);
        let nf = n as f64;
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for &g in &guesses {
            let mut z = g * FRAC_1_SQRT_2;
            let mut pp = 1.0;
            for _ in 0..20 {
                let mut p1 = PIM4;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let jf = j as f64;
                    let p3 = p2;
                    p2 = p1;
                    p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let step = p1 / pp;
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes.push(z * SQRT_2);
            weights.push(2.0 / (pp * pp) / PI.sqrt());
        }
        // exact symmetry
        for i in 0..n / 2 {
            let (a, b) = (nodes[n - 1 - i], weights[n - 1 - i]);
            nodes[i] = -a;
            weights[i] = b;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    /// Gauss-Legendre rule on `[-1, 1]`.
    pub fn legendre(n: usize) -> Self {
        let m = n.div_ceil(2);
        let nf = n as f64;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..m {
            let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = 1.0;
                let mut p2 = 0.0;
                for j in 1..=n {
                    let jf = j as f64;
                    let p3 = p2;
                    p2 = p1;
                    p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
                }
                pp = nf * (z * p1 - p2) / (z * z - 1.0);
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 {
                    break;
                }
            }
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = 2.0 / ((1.0 - z * z) * pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        Self { nodes, weights }
    }
}

/// Node count and truncation width for [`NormalQuadrature`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadConfig {
    pub nodes: usize,
    pub truncation_sigmas: f64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            nodes: DEFAULT_NODES,
            truncation_sigmas: DEFAULT_TRUNCATION,
        }
    }
}

/// `E[g(U)]` and `E[g(U) U]` for standard normal `U`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMoments {
    pub mean: f64,
    pub first: f64,
}

/// Expectations against the standard normal law.
#[derive(Debug, Clone)]
pub struct NormalQuadrature {
    config: QuadConfig,
    hermite: GaussRule,
    legendre: GaussRule,
}

impl NormalQuadrature {
    pub fn new(config: QuadConfig) -> Result<Self, QuadratureError> {
        if config.nodes < 2 {
            return Err(QuadratureError::TooFewNodes(config.nodes));
        }
        if !(config.truncation_sigmas > 0.0) {
            return Err(QuadratureError::BadTruncation(config.truncation_sigmas));
        }
        let mut hermite = GaussRule::hermite(config.nodes);
        let keep: Vec<usize> = (0..hermite.nodes.len())
            .filter(|&i| hermite.nodes[i].abs() <= config.truncation_sigmas)
            .collect();
        hermite = GaussRule {
            nodes: keep.iter().map(|&i| hermite.nodes[i]).collect(),
            weights: keep.iter().map(|&i| hermite.weights[i]).collect(),
        };
        Ok(Self {
            config,
            hermite,
            legendre: GaussRule::legendre(config.nodes),
        })
    }

    pub fn config(&self) -> QuadConfig {
        self.config
    }

    /// Moments of `payoff(exp(log_mean + sqrt(log_var) U))`.
    ///
    /// With `log_var == 0` the variable is the constant `exp(log_mean)` and
    /// `first` is 0.
    pub fn lognormal<P: Payoff + ?Sized>(
        &self,
        payoff: &P,
        log_mean: f64,
        log_var: f64,
    ) -> GaussianMoments {
        if log_var <= 0.0 {
            return GaussianMoments {
                mean: payoff.value(log_mean.exp()),
                first: 0.0,
            };
        }
        let sd = log_var.sqrt();
        let width = self.config.truncation_sigmas;
        let to_z = |u: f64| (log_mean + sd * u).exp();
        let mut cuts: Vec<f64> = payoff
            .breakpoints()
            .into_iter()
            .filter(|&b| b > 0.0)
            .map(|b| (b.ln() - log_mean) / sd)
            .filter(|&u| u > -width && u < width)
            .collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();

        if cuts.is_empty() {
            if let Some(c) = payoff.constant_on(0.0, f64::INFINITY) {
                return GaussianMoments {
                    mean: c,
                    first: 0.0,
                };
            }
            let (mut mean, mut first) = (0.0, 0.0);
            for (&u, &w) in self.hermite.nodes.iter().zip(&self.hermite.weights) {
                let g = payoff.value(to_z(u));
                mean += w * g;
                first += w * g * u;
            }
            return GaussianMoments { mean, first };
        }

        let mut edges = Vec::with_capacity(cuts.len() + 2);
        edges.push(-width);
        edges.extend(cuts);
        edges.push(width);
        let (mut mean, mut first) = (0.0, 0.0);
        for pair in edges.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (za, zb) = (
                if a <= -width { 0.0 } else { to_z(a) },
                if b >= width { f64::INFINITY } else { to_z(b) },
            );
            if let Some(c) = payoff.constant_on(za, zb) {
                // constant outer panels extend to the full real line
                let lo = if a <= -width { f64::NEG_INFINITY } else { a };
                let hi = if b >= width { f64::INFINITY } else { b };
                mean += c * (normal_cdf(hi) - normal_cdf(lo));
                first += c * (normal_pdf(lo) - normal_pdf(hi));
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (&x, &w) in self.legendre.nodes.iter().zip(&self.legendre.weights) {
                let u = mid + half * x;
                let g = w * half * normal_pdf(u) * payoff.value(to_z(u));
                mean += g;
                first += g * u;
            }
        }
        GaussianMoments { mean, first }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Digital(f64);
    impl Payoff for Digital {
        fn value(&self, z: f64) -> f64 {
            if z >= self.0 {
                1.0
            } else {
                0.0
            }
        }
        fn breakpoints(&self) -> Vec<f64> {
            vec![self.0]
        }
        fn constant_on(&self, lo: f64, hi: f64) -> Option<f64> {
            if hi <= self.0 {
                Some(0.0)
            } else if lo >= self.0 {
                Some(1.0)
            } else {
                None
            }
        }
    }

    #[test]
    fn hermite_integrates_normal_moments() {
        let rule = GaussRule::hermite(40);
        let total: f64 = rule.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-13);
        let m2: f64 = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * x * x).sum();
        let m4: f64 = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * x.powi(4)).sum();
        assert!((m2 - 1.0).abs() < 1e-13);
        assert!((m4 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn large_hermite_rule_is_sorted_and_normalised() {
        let rule = GaussRule::hermite(DEFAULT_NODES);
        assert!(rule.nodes.windows(2).all(|w| w[0] < w[1]));
        let total: f64 = rule.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let rule = GaussRule::legendre(12);
        let int: f64 = rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * x.powi(10)).sum();
        assert!((int - 2.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn lognormal_mean_is_exact() {
        let q = NormalQuadrature::new(QuadConfig::default()).unwrap();
        let s = 0.3f64;
        let m = q.lognormal(&FnPayoff(|z: f64| z), -0.5 * s, s);
        assert!((m.mean - 1.0).abs() < 1e-13);
        // E[e^{sqrt(s) U - s/2} U] = sqrt(s)
        assert!((m.first - s.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn digital_uses_split_domain() {
        let q = NormalQuadrature::new(QuadConfig::default()).unwrap();
        let m = q.lognormal(&Digital(1.2), 0.0, 0.04);
        let d = (1.2f64).ln() / 0.2;
        assert!((m.mean - (1.0 - normal_cdf(d))).abs() < 1e-15);
        assert!((m.first - normal_pdf(d)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(NormalQuadrature::new(QuadConfig {
            nodes: 1,
            truncation_sigmas: 10.0
        })
        .is_err());
    }
}
