//! Market coefficients on a piecewise-constant time grid and the risk
//! quantities derived from them.
//!
//! The bank account starts at `B(0) = 1`. Every coefficient (rate, drift
//! vector, volatility matrix) is constant on each grid interval, so all time
//! integrals below are exact finite sums.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Default lower bound on the spectrum of `sigma sigma^T`.
pub const DEFAULT_ELLIPTICITY: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MarketError {
    #[error("grid must start at 0 and increase strictly; violated at point {index}")]
    BadGrid { index: usize },
    #[error(
        "interval {interval}: smallest eigenvalue {min_eigenvalue:e} of sigma*sigma^T is below c1 = {c1:e}"
    )]
    EllipticityViolated {
        interval: usize,
        min_eigenvalue: f64,
        c1: f64,
    },
    #[error("initial price of stock {stock} must be positive, got {value}")]
    NonPositivePrice { stock: usize, value: f64 },
    #[error("{field}: {reason}")]
    Shape { field: String, reason: String },
    #[error("{field} contains a non-finite value")]
    NonFinite { field: String },
}

fn shape(field: impl Into<String>, reason: impl Into<String>) -> MarketError {
    MarketError::Shape {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Market coefficients `(r, a, sigma)` on an explicit time grid together with
/// initial prices and wealth.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketParams {
    grid: Vec<f64>,
    rates: Vec<f64>,
    drifts: Vec<DVector<f64>>,
    vols: Vec<DMatrix<f64>>,
    s0: DVector<f64>,
    x0: f64,
}

impl MarketParams {
    /// Assembles a market, checking only that the pieces fit together
    /// dimensionally. Use [`validate_market`] for the full invariant check.
    pub fn new(
        grid: Vec<f64>,
        rates: Vec<f64>,
        drifts: Vec<DVector<f64>>,
        vols: Vec<DMatrix<f64>>,
        s0: DVector<f64>,
        x0: f64,
    ) -> Result<Self, MarketError> {
        let n = s0.len();
        if n == 0 {
            return Err(shape("s0", "at least one stock is required"));
        }
        if grid.len() < 2 {
            return Err(shape("grid", "needs at least two points"));
        }
        let intervals = grid.len() - 1;
        if rates.len() != intervals {
            return Err(shape(
                "rate",
                format!("expected {intervals} values, got {}", rates.len()),
            ));
        }
        if drifts.len() != intervals {
            return Err(shape(
                "drift",
                format!("expected {intervals} vectors, got {}", drifts.len()),
            ));
        }
        if vols.len() != intervals {
            return Err(shape(
                "vol",
                format!("expected {intervals} matrices, got {}", vols.len()),
            ));
        }
        for (k, a) in drifts.iter().enumerate() {
            if a.len() != n {
                return Err(shape(
                    format!("drift[{k}]"),
                    format!("expected {n} entries, got {}", a.len()),
                ));
            }
        }
        for (k, s) in vols.iter().enumerate() {
            if s.nrows() != n || s.ncols() != n {
                return Err(shape(
                    format!("vol[{k}]"),
                    format!("expected {n}x{n}, got {}x{}", s.nrows(), s.ncols()),
                ));
            }
        }
        Ok(Self {
            grid,
            rates,
            drifts,
            vols,
            s0,
            x0,
        })
    }

    /// Single-interval market on `[0, horizon]`.
    pub fn constant(
        horizon: f64,
        rate: f64,
        drift: DVector<f64>,
        vol: DMatrix<f64>,
        s0: DVector<f64>,
        x0: f64,
    ) -> Result<Self, MarketError> {
        Self::new(
            vec![0.0, horizon],
            vec![rate],
            vec![drift],
            vec![vol],
            s0,
            x0,
        )
    }

    pub fn n(&self) -> usize {
        self.s0.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().expect("grid has at least two points")
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn intervals(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn interval_length(&self, k: usize) -> f64 {
        self.grid[k + 1] - self.grid[k]
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn drifts(&self) -> &[DVector<f64>] {
        &self.drifts
    }

    pub fn vols(&self) -> &[DMatrix<f64>] {
        &self.vols
    }

    pub fn s0(&self) -> &DVector<f64> {
        &self.s0
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    /// Excess drift `a - r` on interval `k`.
    pub fn excess_drift(&self, k: usize) -> DVector<f64> {
        self.drifts[k].add_scalar(-self.rates[k])
    }

    /// Same market with the drifts replaced (volatility unchanged).
    pub fn with_drifts(&self, drifts: Vec<DVector<f64>>) -> Result<Self, MarketError> {
        Self::new(
            self.grid.clone(),
            self.rates.clone(),
            drifts,
            self.vols.clone(),
            self.s0.clone(),
            self.x0,
        )
    }

    pub fn with_x0(mut self, x0: f64) -> Self {
        self.x0 = x0;
        self
    }

    /// Index of the grid interval containing `t` (right-continuous; `T` maps
    /// to the last interval).
    pub fn interval_at(&self, t: f64) -> usize {
        let k = self.grid.partition_point(|&g| g <= t);
        k.saturating_sub(1).min(self.intervals() - 1)
    }
}

/// Smallest eigenvalue of the symmetric matrix `m`.
pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Checks every invariant of `params` with ellipticity constant `c1`.
pub fn validate_market(params: &MarketParams, c1: f64) -> Result<(), MarketError> {
    if !(c1 > 0.0 && c1.is_finite()) {
        return Err(shape("c1", "must be positive and finite"));
    }
    let grid = params.grid();
    if grid.iter().any(|g| !g.is_finite()) {
        return Err(MarketError::NonFinite {
            field: "grid".into(),
        });
    }
    if grid[0] != 0.0 {
        return Err(MarketError::BadGrid { index: 0 });
    }
    for (i, w) in grid.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(MarketError::BadGrid { index: i + 1 });
        }
    }
    if params.rates.iter().any(|r| !r.is_finite()) {
        return Err(MarketError::NonFinite {
            field: "rate".into(),
        });
    }
    for (k, a) in params.drifts.iter().enumerate() {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(MarketError::NonFinite {
                field: format!("drift[{k}]"),
            });
        }
    }
    if !params.x0.is_finite() {
        return Err(MarketError::NonFinite { field: "x0".into() });
    }
    for (stock, &value) in params.s0.iter().enumerate() {
        if !value.is_finite() {
            return Err(MarketError::NonFinite { field: "s0".into() });
        }
        if value <= 0.0 {
            return Err(MarketError::NonPositivePrice { stock, value });
        }
    }
    for (interval, sigma) in params.vols.iter().enumerate() {
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(MarketError::NonFinite {
                field: format!("vol[{interval}]"),
            });
        }
        let v = sigma * sigma.transpose();
        let min_eigenvalue = min_eigenvalue(&v);
        if min_eigenvalue < c1 {
            return Err(MarketError::EllipticityViolated {
                interval,
                min_eigenvalue,
                c1,
            });
        }
    }
    Ok(())
}

/// Risk quantities of a single grid interval.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalRisk {
    /// `V = sigma sigma^T`.
    pub covariance: DMatrix<f64>,
    /// `Q = V^{-1}`.
    pub precision: DMatrix<f64>,
    /// `a - r`.
    pub excess: DVector<f64>,
    /// Market price of risk `sigma^{-1} (a - r)`.
    pub theta: DVector<f64>,
    /// `|theta|^2`.
    pub theta_sq: f64,
}

/// Derived risk quantities of a market.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskMetrics {
    grid: Vec<f64>,
    rates: Vec<f64>,
    intervals: Vec<IntervalRisk>,
    /// `int_0^{t_k} |theta|^2` at every grid point.
    cumulative: Vec<f64>,
    /// `int_0^{t_k} r` at every grid point.
    cumulative_rate: Vec<f64>,
}

impl RiskMetrics {
    pub fn intervals(&self) -> &[IntervalRisk] {
        &self.intervals
    }

    pub fn interval(&self, k: usize) -> &IntervalRisk {
        &self.intervals[k]
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    /// Total risk `R = int_0^T |theta|^2 dt`.
    pub fn total_risk(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// `R / T`.
    pub fn mean_risk(&self) -> f64 {
        self.total_risk() / self.horizon()
    }

    /// `J = E R`; `R` itself for deterministic coefficients.
    pub fn expected_risk(&self) -> f64 {
        self.total_risk()
    }

    fn locate(&self, t: f64) -> usize {
        let k = self.grid.partition_point(|&g| g <= t);
        k.saturating_sub(1).min(self.intervals.len() - 1)
    }

    /// `int_0^t |theta(s)|^2 ds`.
    pub fn cumulative_risk(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.horizon());
        if t >= self.horizon() {
            return self.total_risk();
        }
        let k = self.locate(t);
        self.cumulative[k] + self.intervals[k].theta_sq * (t - self.grid[k])
    }

    /// Time change `tau(t) = int_0^t |theta|^2 / Rbar`, or `t` itself for a
    /// riskless market.
    pub fn tau(&self, t: f64) -> f64 {
        let r = self.total_risk();
        if r <= 0.0 {
            return t.clamp(0.0, self.horizon());
        }
        self.horizon() * (self.cumulative_risk(t) / r)
    }

    /// Variance of `log Z(T)` still to come after `t`: `R - int_0^t |theta|^2`.
    pub fn remaining_risk(&self, t: f64) -> f64 {
        (self.total_risk() - self.cumulative_risk(t)).max(0.0)
    }

    /// Bank account `B(t) = exp(int_0^t r)`.
    pub fn bank(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.horizon());
        let k = self.locate(t);
        (self.cumulative_rate[k] + self.rates[k] * (t - self.grid[k])).exp()
    }

    /// Discount factor `p(t) = 1 / B(t)`.
    pub fn discount(&self, t: f64) -> f64 {
        1.0 / self.bank(t)
    }
}

/// Computes `V, Q, theta, R, Rbar, J, tau` for every interval.
pub fn compute_metrics(params: &MarketParams) -> Result<RiskMetrics, MarketError> {
    let mut intervals = Vec::with_capacity(params.intervals());
    let mut cumulative = vec![0.0];
    let mut cumulative_rate = vec![0.0];
    for k in 0..params.intervals() {
        let sigma = &params.vols[k];
        let covariance = sigma * sigma.transpose();
        let singular = || MarketError::EllipticityViolated {
            interval: k,
            min_eigenvalue: min_eigenvalue(&covariance),
            c1: 0.0,
        };
        let precision = covariance
            .clone()
            .cholesky()
            .ok_or_else(singular)?
            .inverse();
        let excess = params.excess_drift(k);
        let theta = sigma.clone().lu().solve(&excess).ok_or_else(singular)?;
        let theta_sq = theta.norm_squared();
        let dt = params.interval_length(k);
        cumulative.push(cumulative[k] + theta_sq * dt);
        cumulative_rate.push(cumulative_rate[k] + params.rates[k] * dt);
        intervals.push(IntervalRisk {
            covariance,
            precision,
            excess,
            theta,
            theta_sq,
        });
    }
    Ok(RiskMetrics {
        grid: params.grid.clone(),
        rates: params.rates.clone(),
        intervals,
        cumulative,
        cumulative_rate,
    })
}
