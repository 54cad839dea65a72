//! Shared fixtures for the benchmarks.

use optfolio::{DMatrix, DVector, MarketParams};

/// Two uncorrelated stocks, a = (0.05, 0.06), sigma = diag(0.2, 0.3), T = 1.
pub fn two_stock() -> MarketParams {
    MarketParams::constant(
        1.0,
        0.0,
        DVector::from_vec(vec![0.05, 0.06]),
        DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.3])),
        DVector::from_element(2, 1.0),
        1.0,
    )
    .unwrap()
}

/// `n` stocks with banded volatility and increasing drifts.
pub fn banded(n: usize) -> MarketParams {
    let vol = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.15 + 0.01 * i as f64
        } else if j + 1 == i {
            0.03
        } else {
            0.0
        }
    });
    let drift = DVector::from_fn(n, |i, _| 0.02 + 0.005 * i as f64);
    MarketParams::constant(1.0, 0.0, drift, vol, DVector::from_element(n, 1.0), 1.0).unwrap()
}
