//! Sample statistics with a reduction order that does not depend on how many
//! worker threads run it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Paths per reduction chunk. The chunk layout is a function of the sample
/// size only, so results are bit-identical for any thread count.
pub const CHUNK: usize = 1024;

/// Running mean and sum of squared deviations (Welford / Chan).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * (self.count as f64) * (other.count as f64) / n;
        self.count += other.count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (0 for fewer than two samples).
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            mean: self.mean,
            std_error: (self.variance() / self.count.max(1) as f64).sqrt(),
            count: self.count,
        }
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub count: u64,
}

impl Estimate {
    /// Difference of two independent estimates.
    pub fn minus_independent(&self, other: &Estimate) -> Estimate {
        Estimate {
            mean: self.mean - other.mean,
            std_error: self.std_error.hypot(other.std_error),
            count: self.count.min(other.count),
        }
    }
}

/// Maps every index in `0..n` to an optional sample and reduces the samples
/// in fixed-size chunks, merged in index order.
pub fn chunked_moments<F>(n: usize, sample: F) -> Moments
where
    F: Fn(usize) -> Option<f64> + Sync,
{
    chunked_fold(n, Moments::default, |acc, i| {
        if let Some(x) = sample(i) {
            acc.push(x);
        }
    })
    .into_iter()
    .fold(Moments::default(), |mut acc, m| {
        acc.merge(&m);
        acc
    })
}

/// Folds each fixed chunk of `0..n` sequentially, chunks in parallel, and
/// returns the per-chunk accumulators in chunk order.
pub fn chunked_fold<A, I, F>(n: usize, init: I, step: F) -> Vec<A>
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) + Sync,
{
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                step(&mut acc, i);
            }
            acc
        })
        .collect()
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal distribution function, accurate in both tails.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Inverse of [`normal_cdf`] on `(0, 1)`.
///
/// The library quantile is good to about 1e-10 relative; two Halley steps
/// against [`normal_cdf`] bring it to full double precision.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    if p == 0.5 {
        return 0.0;
    }
    let mut x = Normal::standard().inverse_cdf(p);
    for _ in 0..2 {
        let e = normal_cdf(x) - p;
        let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_matches_single_pass() {
        let xs: Vec<f64> = (0..5000).map(|i| ((i * 7919) % 1000) as f64 * 0.01).collect();
        let mut all = Moments::default();
        xs.iter().for_each(|&x| all.push(x));
        let chunked = chunked_moments(xs.len(), |i| Some(xs[i]));
        assert_eq!(chunked.count(), all.count());
        assert!((chunked.mean() - all.mean()).abs() < 1e-12);
        assert!((chunked.variance() - all.variance()).abs() < 1e-10);
    }

    #[test]
    fn constant_sample_has_zero_error() {
        let m = chunked_moments(3000, |_| Some(2.5));
        let e = m.estimate();
        assert_eq!(e.mean, 2.5);
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-12, 1e-6, 0.01, 0.2, 0.5, 0.7, 0.975, 1.0 - 1e-9] {
            let x = normal_quantile(p);
            assert!((normal_cdf(x) - p).abs() <= 1e-15_f64.max(p * 1e-13), "p={p}");
        }
        assert_eq!(normal_quantile(0.5), 0.0);
        assert_eq!(normal_cdf(1.959963984540054), 0.975);
    }
}
