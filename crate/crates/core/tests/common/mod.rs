#![allow(dead_code)]

use optfolio::{DMatrix, DVector, MarketParams};
use proptest::prelude::*;

pub fn running_example() -> MarketParams {
    MarketParams::constant(
        1.0,
        0.0,
        DVector::from_vec(vec![0.05, 0.06]),
        DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.3]),
        DVector::from_vec(vec![1.0, 1.0]),
        1.0,
    )
    .unwrap()
}

/// Lower-triangular volatility with a positive diagonal, so `sigma sigma^T`
/// is positive definite.
pub fn vol_matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    (
        prop::collection::vec(0.05f64..0.5, n),
        prop::collection::vec(-0.2f64..0.2, n * n),
    )
        .prop_map(move |(diag, off)| {
            DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    diag[i]
                } else if j < i {
                    off[i * n + j]
                } else {
                    0.0
                }
            })
        })
}

pub fn drift(n: usize) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-0.1f64..0.2, n).prop_map(DVector::from_vec)
}

pub fn market(n: usize) -> impl Strategy<Value = MarketParams> {
    (vol_matrix(n), drift(n), 0.0f64..0.05, 0.25f64..3.0).prop_map(move |(vol, a, r, t)| {
        MarketParams::constant(t, r, a, vol, DVector::from_element(n, 1.0), 1.0).unwrap()
    })
}
