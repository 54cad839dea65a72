//! Optimal portfolio selection in a multi-stock diffusion market with
//! piecewise-constant coefficients, and portfolio compression: holding at
//! most `m` of the `n` stocks.
//!
//! The pipeline is
//!
//! 1. [`market`]: coefficients and the derived risk quantities `theta`, `R`, `tau`;
//! 2. [`utility`]: the optimal terminal claim `F(Z(T), lambda_J)`;
//! 3. [`replicate`]: the heat-equation solution `H` and the replicating strategy;
//! 4. [`simulate`]: path ensembles and strategy-driven wealth;
//! 5. [`compress`]: subset selection and compressed markets;
//! 6. [`verify`]: Monte Carlo and quadrature checks of the identities above.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compress;
pub mod market;
pub mod quadrature;
pub mod replicate;
pub mod simulate;
pub mod stats;
pub mod utility;
pub mod verify;

pub use compress::{select_subset, CompressError, Subset, SubsetPolicy};
pub use market::{compute_metrics, validate_market, MarketError, MarketParams, RiskMetrics};
pub use quadrature::{NormalQuadrature, Payoff, QuadConfig};
pub use replicate::{
    optimal_strategy, Exposure, HeatSolution, OptimalStrategy, ReplicateError, Strategy, StrategyKind,
};
pub use simulate::{
    evolve_wealth, simulate_ensemble, Measure, PathEnsemble, ScenarioMixture, SimConfig, SimError,
    WealthEnsemble,
};
pub use stats::Estimate;
pub use utility::{calibrate_lambda, Domain, UtilityError, UtilityFamily, UtilitySpec};
pub use verify::{CheckReport, VerifyError};

pub use nalgebra::{DMatrix, DVector};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
