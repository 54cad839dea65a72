//! Replication of claims `f(Z(T))` and the feedback strategies built from
//! them.
//!
//! The backward equation `H_t + (Rbar/2) x^2 H_xx = 0, H(., T) = f` is solved
//! through its fundamental solution: with `s = Rbar (T - t)` and
//! `G ~ Normal(-s/2, s)`,
//!
//! ```text
//! H(x, t)    = E[f(x e^G)]
//! H_x(x, t)  = E[f(x e^G) U] / (x sqrt(s)),   U = (G + s/2) / sqrt(s)
//! ```
//!
//! The second line is the kernel derivative moved inside the integral, so it
//! is well defined for discontinuous payoffs.

use crate::compress::SubsetPolicy;
use crate::market::{compute_metrics, MarketError, MarketParams, RiskMetrics};
use crate::quadrature::{NormalQuadrature, Payoff, QuadConfig, QuadratureError};
use crate::utility::{
    calibrate_lambda, check_growth_bound, CalibratedClaim, Domain, UtilityError, UtilitySpec,
};
use nalgebra::DVector;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReplicateError {
    #[error("growth constant c0 = {c0} must lie in (0, 1/(2J)) = (0, {limit})")]
    GrowthBoundViolated { c0: f64, limit: f64 },
    #[error("derivative requested at t = T, where only the payoff itself is defined")]
    DegenerateTime,
    #[error("time {t} lies outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("bad parameters: {0}")]
    BadParameters(String),
    #[error("heat solution uses Rbar = {heat}, market has Rbar = {market}")]
    RiskMismatch { heat: f64, market: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Compress(#[from] crate::compress::CompressError),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

/// Constants `(C, c0)` with `|f(z)| <= C z^{c0 log z}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthBound {
    pub c: f64,
    pub c0: f64,
}

/// Terminal payoff `C1 (x/lambda)^nu + C0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerForm {
    pub nu: f64,
    pub c0: f64,
    pub c1: f64,
    pub lambda: f64,
}

impl PowerForm {
    fn term(&self, x: f64) -> f64 {
        self.c1 * (x / self.lambda).powf(self.nu)
    }
}

#[derive(Clone)]
enum HeatKind {
    Quadrature {
        payoff: Arc<dyn Payoff>,
        quad: Arc<NormalQuadrature>,
    },
    ClosedForm(PowerForm),
}

/// Solution `H(x, t)` of the backward heat equation with terminal data `f`.
#[derive(Clone)]
pub struct HeatSolution {
    kind: HeatKind,
    mean_risk: f64,
    horizon: f64,
}

impl fmt::Debug for HeatSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            HeatKind::Quadrature { quad, .. } => format!("Quadrature({:?})", quad.config()),
            HeatKind::ClosedForm(p) => format!("{p:?}"),
        };
        f.debug_struct("HeatSolution")
            .field("kind", &kind)
            .field("mean_risk", &self.mean_risk)
            .field("horizon", &self.horizon)
            .finish()
    }
}

/// Solves the backward equation for `payoff` by Gaussian quadrature.
pub fn solve_heat(
    payoff: Arc<dyn Payoff>,
    growth: GrowthBound,
    mean_risk: f64,
    horizon: f64,
    quad: QuadConfig,
) -> Result<HeatSolution, ReplicateError> {
    check_horizon(mean_risk, horizon)?;
    let j = mean_risk * horizon;
    let limit = if j > 0.0 { 0.5 / j } else { f64::INFINITY };
    if !(growth.c0 > 0.0 && growth.c0 < limit) {
        return Err(ReplicateError::GrowthBoundViolated {
            c0: growth.c0,
            limit,
        });
    }
    Ok(HeatSolution {
        kind: HeatKind::Quadrature {
            payoff,
            quad: Arc::new(NormalQuadrature::new(quad)?),
        },
        mean_risk,
        horizon,
    })
}

/// Exact solution for the terminal payoff `C1 (x/lambda)^nu + C0`.
#[allow(non_snake_case)]
pub fn closed_form_H(
    nu: f64,
    c0: f64,
    c1: f64,
    lambda: f64,
    mean_risk: f64,
    horizon: f64,
) -> Result<HeatSolution, ReplicateError> {
    check_horizon(mean_risk, horizon)?;
    if nu == 0.0 || c1 == 0.0 || !nu.is_finite() || !c1.is_finite() || !c0.is_finite() {
        return Err(ReplicateError::BadParameters(
            "closed form needs finite nu != 0 and C1 != 0".into(),
        ));
    }
    Ok(HeatSolution {
        kind: HeatKind::ClosedForm(PowerForm {
            nu,
            c0,
            c1,
            lambda,
        }),
        mean_risk,
        horizon,
    })
}

fn check_horizon(mean_risk: f64, horizon: f64) -> Result<(), ReplicateError> {
    if !(horizon > 0.0 && horizon.is_finite()) || !(mean_risk >= 0.0 && mean_risk.is_finite()) {
        return Err(ReplicateError::BadParameters(format!(
            "need T > 0 and Rbar >= 0, got T = {horizon}, Rbar = {mean_risk}"
        )));
    }
    Ok(())
}

impl HeatSolution {
    pub fn mean_risk(&self) -> f64 {
        self.mean_risk
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn power_form(&self) -> Option<PowerForm> {
        match self.kind {
            HeatKind::ClosedForm(p) => Some(p),
            HeatKind::Quadrature { .. } => None,
        }
    }

    pub fn is_closed_form(&self) -> bool {
        self.power_form().is_some()
    }

    /// Terminal payoff `f(x)`.
    pub fn payoff(&self, x: f64) -> f64 {
        match &self.kind {
            HeatKind::ClosedForm(p) => p.term(x) + p.c0,
            HeatKind::Quadrature { payoff, .. } => payoff.value(x),
        }
    }

    fn variance_at(&self, t: f64) -> Result<f64, ReplicateError> {
        if !(t >= 0.0 && t <= self.horizon * (1.0 + 1e-12)) {
            return Err(ReplicateError::TimeOutOfRange {
                t,
                horizon: self.horizon,
            });
        }
        Ok((self.mean_risk * (self.horizon - t)).max(0.0))
    }

    /// `H(x, t)`; at `t = T` this is the payoff itself.
    pub fn value(&self, x: f64, t: f64) -> Result<f64, ReplicateError> {
        let s = self.variance_at(t)?;
        Ok(self.value_at_variance(x, s))
    }

    /// `H_x(x, t)` for `t < T`.
    pub fn derivative(&self, x: f64, t: f64) -> Result<f64, ReplicateError> {
        let s = self.variance_at(t)?;
        self.derivative_at_variance(x, s)
    }

    /// `H` expressed through the remaining log-variance `s = Rbar (T - t)`.
    pub fn value_at_variance(&self, x: f64, s: f64) -> f64 {
        match &self.kind {
            HeatKind::ClosedForm(p) => {
                p.term(x) * (0.5 * p.nu * (p.nu - 1.0) * s).exp() + p.c0
            }
            HeatKind::Quadrature { payoff, quad } => {
                if s <= 0.0 {
                    payoff.value(x)
                } else {
                    quad.lognormal(payoff.as_ref(), x.ln() - 0.5 * s, s).mean
                }
            }
        }
    }

    pub fn derivative_at_variance(&self, x: f64, s: f64) -> Result<f64, ReplicateError> {
        match &self.kind {
            HeatKind::ClosedForm(p) => {
                let h = p.term(x) * (0.5 * p.nu * (p.nu - 1.0) * s).exp();
                Ok(p.nu * h / x)
            }
            HeatKind::Quadrature { payoff, quad } => {
                if s <= 0.0 {
                    return Err(ReplicateError::DegenerateTime);
                }
                let m = quad.lognormal(payoff.as_ref(), x.ln() - 0.5 * s, s);
                Ok(m.first / (x * s.sqrt()))
            }
        }
    }
}

/// Position rule of a strategy on one market.
#[derive(Debug, Clone)]
pub enum FeedbackRule {
    /// Bond only.
    Trivial,
    /// `pi = nu B (X~ - C0) Q a~`.
    Power { nu: f64, c0: f64 },
    /// `pi = B H_x(Z, tau) Z Q a~`.
    Pde(HeatSolution),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyKind {
    Trivial,
    PowerFeedback,
    PdeFeedback,
}

/// The market a strategy is optimal in, seen from the original market: the
/// risk metrics of that market and the position direction per interval.
///
/// For the full market the direction is `Q a~`; for a compressed market it is
/// `Q_I P_I a~`, which has zero entries outside the subset.
#[derive(Debug, Clone)]
pub struct Exposure {
    metrics: RiskMetrics,
    direction: Vec<DVector<f64>>,
}

impl Exposure {
    pub fn full(params: &MarketParams) -> Result<Self, ReplicateError> {
        let metrics = compute_metrics(params)?;
        let direction = metrics
            .intervals()
            .iter()
            .map(|iv| &iv.precision * &iv.excess)
            .collect();
        Ok(Self { metrics, direction })
    }

    /// Exposure of the compressed market with drift `a_I` from `policy`.
    pub fn compressed(params: &MarketParams, policy: &SubsetPolicy) -> Result<Self, ReplicateError> {
        let market = policy.compressed_market(params)?;
        let metrics = compute_metrics(&market)?;
        let direction = (0..params.intervals())
            .map(|k| {
                let sel = policy.interval(k);
                &sel.restricted_inverse * (&sel.projector * params.excess_drift(k))
            })
            .collect();
        Ok(Self { metrics, direction })
    }

    pub fn metrics(&self) -> &RiskMetrics {
        &self.metrics
    }

    pub fn direction(&self, k: usize) -> &DVector<f64> {
        &self.direction[k]
    }
}

/// A feedback rule bound to one market.
#[derive(Debug, Clone)]
pub struct StrategyLeg {
    rule: FeedbackRule,
    exposure: Exposure,
}

impl StrategyLeg {
    pub fn new(rule: FeedbackRule, exposure: Exposure) -> Result<Self, ReplicateError> {
        if let FeedbackRule::Pde(h) = &rule {
            let market = exposure.metrics.mean_risk();
            if (h.mean_risk() - market).abs() > 1e-12 * market.max(1.0) {
                return Err(ReplicateError::RiskMismatch {
                    heat: h.mean_risk(),
                    market,
                });
            }
        }
        let rule = if exposure.metrics.total_risk() == 0.0 {
            FeedbackRule::Trivial
        } else {
            rule
        };
        Ok(Self { rule, exposure })
    }

    pub fn rule(&self) -> &FeedbackRule {
        &self.rule
    }

    pub fn exposure(&self) -> &Exposure {
        &self.exposure
    }

    pub fn metrics(&self) -> &RiskMetrics {
        &self.exposure.metrics
    }

    /// Whether the rule trades during interval `k`.
    pub fn trades(&self, k: usize) -> bool {
        !matches!(self.rule, FeedbackRule::Trivial) && self.metrics().interval(k).theta_sq > 0.0
    }

    /// Scalar exposure `g` with `p pi^T sigma = g theta^T`.
    fn exposure_scale(&self, t: f64, z: f64, x: f64) -> f64 {
        match &self.rule {
            FeedbackRule::Trivial => 0.0,
            FeedbackRule::Power { nu, c0 } => nu * (x - c0),
            FeedbackRule::Pde(h) => h
                .derivative(z, self.metrics().tau(t))
                .map(|d| d * z)
                .unwrap_or(0.0),
        }
    }

    /// Advances normalized wealth over one step on interval `k` starting at
    /// `t`. `dw_star` is the step's increment of this market's `w_*`; `z` and
    /// `z_next` are this market's density at both ends of the step.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn advance(
        &self,
        k: usize,
        t: f64,
        dt: f64,
        dw_star: &[f64],
        z: f64,
        z_next: f64,
        x: f64,
    ) -> f64 {
        if !self.trades(k) {
            return x;
        }
        match &self.rule {
            FeedbackRule::Trivial => x,
            FeedbackRule::Power { nu, c0 } => {
                let iv = self.metrics().interval(k);
                let drive: f64 = iv.theta.iter().zip(dw_star).map(|(a, b)| a * b).sum();
                c0 + (x - c0) * (nu * drive - 0.5 * nu * nu * iv.theta_sq * dt).exp()
            }
            FeedbackRule::Pde(h) => {
                let delta = h.derivative(z, self.metrics().tau(t)).unwrap_or(0.0);
                x + delta * (z_next - z)
            }
        }
    }
}

/// A self-financing strategy, one leg per coefficient scenario.
#[derive(Debug, Clone)]
pub struct Strategy {
    legs: Vec<StrategyLeg>,
    cutoff: f64,
    domain: Domain,
}

impl Strategy {
    pub fn new(legs: Vec<StrategyLeg>, cutoff: f64) -> Result<Self, ReplicateError> {
        let Some(first) = legs.first() else {
            return Err(ReplicateError::BadParameters("strategy needs a leg".into()));
        };
        let horizon = first.metrics().horizon();
        if !(cutoff >= 0.0 && cutoff < horizon) {
            return Err(ReplicateError::BadParameters(format!(
                "cutoff {cutoff} must lie in [0, {horizon})"
            )));
        }
        Ok(Self {
            legs,
            cutoff,
            domain: Domain::Real,
        })
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn legs(&self) -> &[StrategyLeg] {
        &self.legs
    }

    pub fn leg(&self, scenario: usize) -> &StrategyLeg {
        &self.legs[scenario]
    }

    pub fn horizon(&self) -> f64 {
        self.legs[0].metrics().horizon()
    }

    /// Trivial only if every leg is.
    pub fn kind(&self) -> StrategyKind {
        let mut kind = StrategyKind::Trivial;
        for leg in &self.legs {
            match leg.rule {
                FeedbackRule::Trivial => {}
                FeedbackRule::Power { .. } => kind = StrategyKind::PowerFeedback,
                FeedbackRule::Pde(_) => return StrategyKind::PdeFeedback,
            }
        }
        kind
    }

    /// Whether positions are closed at time `t` (bond only on `[T - eps, T]`).
    pub fn is_frozen(&self, t: f64) -> bool {
        self.cutoff > 0.0 && t >= self.horizon() - self.cutoff - 1e-12 * self.horizon()
    }

    /// Stock positions `pi(t)` given the strategy market's density `z` and
    /// the normalized wealth `x`.
    pub fn position(&self, scenario: usize, t: f64, z: f64, x: f64) -> DVector<f64> {
        let leg = &self.legs[scenario];
        let metrics = leg.metrics();
        let n = leg.exposure.direction[0].len();
        if self.is_frozen(t) {
            return DVector::zeros(n);
        }
        let k = metrics.grid().partition_point(|&g| g <= t).saturating_sub(1);
        let k = k.min(metrics.intervals().len() - 1);
        if !leg.trades(k) {
            return DVector::zeros(n);
        }
        leg.exposure.direction[k].clone() * (metrics.bank(t) * leg.exposure_scale(t, z, x))
    }
}

/// Replicating strategy `pi^T = B H_x(Z, tau) Z a~^T Q` for `heat` on the
/// full market; the trivial strategy when the market carries no risk.
pub fn build_strategy(
    heat: &HeatSolution,
    params: &MarketParams,
    epsilon: f64,
) -> Result<Strategy, ReplicateError> {
    let leg = StrategyLeg::new(FeedbackRule::Pde(heat.clone()), Exposure::full(params)?)?;
    Strategy::new(vec![leg], epsilon)
}

/// Replicating strategy of the compressed market: uses `Z_I`, `tau_I` and
/// direction `Q_I P_I a~`, so only stocks in the subset are held.
pub fn build_compressed_strategy(
    heat: &HeatSolution,
    policy: &SubsetPolicy,
    params: &MarketParams,
    epsilon: f64,
) -> Result<Strategy, ReplicateError> {
    let leg = StrategyLeg::new(
        FeedbackRule::Pde(heat.clone()),
        Exposure::compressed(params, policy)?,
    )?;
    Strategy::new(vec![leg], epsilon)
}

/// Wealth feedback strategy `pi^T = nu B (X~ - C0) a~^T Q`.
pub fn build_power_feedback(
    nu: f64,
    c0: f64,
    exposure: Exposure,
    epsilon: f64,
) -> Result<Strategy, ReplicateError> {
    let leg = StrategyLeg::new(FeedbackRule::Power { nu, c0 }, exposure)?;
    Strategy::new(vec![leg], epsilon)
}

/// Cutoff used for discontinuous claims when none is given, as a fraction
/// of the horizon.
pub const DEFAULT_CUTOFF_FRACTION: f64 = 1e-3;

/// An optimal strategy with the claims it replicates, one per leg.
#[derive(Debug, Clone)]
pub struct OptimalStrategy {
    pub strategy: Strategy,
    pub claims: Vec<CalibratedClaim>,
}

/// Optimal strategy for `spec` on the markets described by `exposures` (one
/// per scenario), each calibrated to its own total risk.
///
/// Log utility on a single market uses `H(x, t) = x / lambda`; log, power and
/// mean-variance utilities otherwise use the wealth feedback form; the
/// polynomial goal and goal-achieving families replicate `F(Z(T), lambda_J)`
/// through the quadrature solution. With `epsilon = None` the cutoff is
/// `1e-3 T` for discontinuous claims and 0 otherwise.
pub fn optimal_strategy(
    spec: UtilitySpec,
    exposures: Vec<Exposure>,
    x0: f64,
    quad: QuadConfig,
    epsilon: Option<f64>,
) -> Result<OptimalStrategy, ReplicateError> {
    let nq = NormalQuadrature::new(quad)?;
    let single = exposures.len() == 1;
    let mut legs = Vec::with_capacity(exposures.len());
    let mut claims = Vec::with_capacity(exposures.len());
    let mut discontinuous = false;
    for exposure in exposures {
        let m = exposure.metrics();
        let (risk, rbar, horizon) = (m.total_risk(), m.mean_risk(), m.horizon());
        let claim = calibrate_lambda(spec, x0, risk, &nq)?;
        discontinuous |= claim.is_discontinuous();
        let rule = if risk == 0.0 || claim.is_constant() {
            FeedbackRule::Trivial
        } else {
            match claim.power_form() {
                Some(p) if single && p.nu == 1.0 && p.c0 == 0.0 => FeedbackRule::Pde(closed_form_H(
                    p.nu, p.c0, p.c1, p.lambda, rbar, horizon,
                )?),
                Some(p) => FeedbackRule::Power {
                    nu: p.nu,
                    c0: p.c0,
                },
                None => {
                    let growth = check_growth_bound(&claim, risk)?;
                    FeedbackRule::Pde(solve_heat(Arc::new(claim), growth, rbar, horizon, quad)?)
                }
            }
        };
        legs.push(StrategyLeg::new(rule, exposure)?);
        claims.push(claim);
    }
    let horizon = legs
        .first()
        .map(|l| l.metrics().horizon())
        .ok_or_else(|| ReplicateError::BadParameters("no markets given".into()))?;
    let cutoff = epsilon.unwrap_or(if discontinuous {
        DEFAULT_CUTOFF_FRACTION * horizon
    } else {
        0.0
    });
    let strategy = Strategy::new(legs, cutoff)?.with_domain(spec.domain());
    Ok(OptimalStrategy { strategy, claims })
}
