//! Utility families, their pointwise maximizers `F(z, lambda)` and the
//! calibration of the multiplier `lambda_J` against the budget constraint
//! `E_* F(Z(T), lambda_J) = x0`.
//!
//! Under `P_*`, `log Z(T) ~ Normal(-R/2, R)`; under `P` it is
//! `Normal(R/2, R)`. Both expectations are taken with [`NormalQuadrature`].

use crate::quadrature::{NormalQuadrature, Payoff, QuadratureError};
use crate::replicate::{GrowthBound, PowerForm};
use crate::stats::{chunked_moments, normal_quantile, Estimate};
use thiserror::Error;

/// Relative tolerance of the budget check run after every calibration.
pub const BUDGET_TOLERANCE: f64 = 1e-8;

/// Bisection tolerance for the polynomial-goal multiplier.
pub const ROOT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UtilityError {
    #[error("bad utility parameters: {0}")]
    BadParameters(String),
    #[error("calibration failed: {0}")]
    CalibrationFailed(String),
    #[error("goal-achieving utility needs R > 0")]
    GoalWithZeroRisk,
    #[error("no growth constant c0 < 1/(2J) = {limit} bounds the claim on the test grid")]
    GrowthBoundUnsatisfiable { limit: f64 },
    #[error("expected risk J = {0} must be positive")]
    NonPositiveRisk(f64),
    #[error("no admissible samples")]
    EmptySample,
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
}

/// Admissible terminal wealth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    NonNegative,
    Real,
}

impl Domain {
    pub fn contains(&self, x: f64) -> bool {
        match self {
            Domain::NonNegative => x >= 0.0,
            Domain::Real => x.is_finite(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UtilityFamily {
    /// `log x`.
    Log,
    /// `x^delta / delta`.
    Power { delta: f64 },
    /// `-k x^2 + c x`.
    MeanVariance { k: f64, c: f64 },
    /// `x - x^delta` with `delta = 1 + 1/l`.
    PolynomialGoal { l: u32 },
    /// `1{x >= alpha}`.
    GoalAchieving { alpha: f64 },
}

/// A validated utility family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilitySpec {
    family: UtilityFamily,
}

impl UtilitySpec {
    pub fn new(family: UtilityFamily) -> Result<Self, UtilityError> {
        let bad = |m: &str| Err(UtilityError::BadParameters(m.into()));
        match family {
            UtilityFamily::Log => {}
            UtilityFamily::Power { delta } => {
                if !(delta.is_finite() && delta < 1.0 && delta != 0.0) {
                    return bad("power utility needs delta < 1, delta != 0");
                }
            }
            UtilityFamily::MeanVariance { k, c } => {
                if !(k.is_finite() && k > 0.0 && c.is_finite() && c >= 0.0) {
                    return bad("mean-variance utility needs k > 0, c >= 0");
                }
            }
            UtilityFamily::PolynomialGoal { l } => {
                if l < 1 {
                    return bad("polynomial goal utility needs l >= 1");
                }
            }
            UtilityFamily::GoalAchieving { alpha } => {
                if !(alpha.is_finite() && alpha > 0.0) {
                    return bad("goal-achieving utility needs alpha > 0");
                }
            }
        }
        Ok(Self { family })
    }

    pub fn family(&self) -> UtilityFamily {
        self.family
    }

    pub fn domain(&self) -> Domain {
        match self.family {
            UtilityFamily::MeanVariance { .. } => Domain::Real,
            _ => Domain::NonNegative,
        }
    }

    /// `delta = 1 + 1/l` of the polynomial goal family.
    fn poly_delta(l: u32) -> f64 {
        1.0 + 1.0 / l as f64
    }

    /// Checks that `x0` is an admissible initial wealth for this family.
    pub fn check_initial_wealth(&self, x0: f64) -> Result<(), UtilityError> {
        let ok = x0.is_finite()
            && match self.family {
                UtilityFamily::Log | UtilityFamily::Power { .. } => x0 > 0.0,
                UtilityFamily::MeanVariance { .. } => true,
                UtilityFamily::PolynomialGoal { l } => x0 > Self::poly_delta(l).powi(-(l as i32)),
                UtilityFamily::GoalAchieving { alpha } => x0 > 0.0 && x0 < alpha,
            };
        if ok {
            Ok(())
        } else {
            Err(UtilityError::BadParameters(format!(
                "initial wealth {x0} not admissible for {:?}",
                self.family
            )))
        }
    }

    /// `U(x)`, or `None` outside the domain or where `U` is infinite.
    pub fn utility(&self, x: f64) -> Option<f64> {
        if !self.domain().contains(x) {
            return None;
        }
        let u = match self.family {
            UtilityFamily::Log => x.ln(),
            UtilityFamily::Power { delta } => x.powf(delta) / delta,
            UtilityFamily::MeanVariance { k, c } => -k * x * x + c * x,
            UtilityFamily::PolynomialGoal { l } => x - x.powf(Self::poly_delta(l)),
            UtilityFamily::GoalAchieving { alpha } => {
                if x >= alpha {
                    1.0
                } else {
                    0.0
                }
            }
        };
        u.is_finite().then_some(u)
    }
}

/// Pointwise maximizer `F(z, lambda)` of `z U(x) - lambda x` over the domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaimFunction {
    spec: UtilitySpec,
}

pub fn pointwise_maximizer(spec: UtilitySpec) -> ClaimFunction {
    ClaimFunction { spec }
}

impl ClaimFunction {
    pub fn spec(&self) -> UtilitySpec {
        self.spec
    }

    pub fn value(&self, z: f64, lambda: f64) -> f64 {
        match self.spec.family {
            UtilityFamily::Log => z / lambda,
            UtilityFamily::Power { delta } => (z / lambda).powf(1.0 / (1.0 - delta)),
            UtilityFamily::MeanVariance { k, c } => (c - lambda / z) / (2.0 * k),
            UtilityFamily::PolynomialGoal { l } => {
                let d = UtilitySpec::poly_delta(l);
                (1.0 - lambda / z).powi(l as i32) * d.powi(-(l as i32))
            }
            UtilityFamily::GoalAchieving { alpha } => {
                if z >= lambda * alpha {
                    alpha
                } else {
                    0.0
                }
            }
        }
    }

    /// Points in `z` where `F(., lambda)` jumps.
    pub fn breakpoints(&self, lambda: f64) -> Vec<f64> {
        match self.spec.family {
            UtilityFamily::GoalAchieving { alpha } => vec![lambda * alpha],
            _ => Vec::new(),
        }
    }

    /// `F(z, lambda) = C1 (z/lambda)^nu + C0` for the log, power and
    /// mean-variance families.
    pub fn power_form(&self, lambda: f64) -> Option<PowerForm> {
        let (nu, c0, c1) = match self.spec.family {
            UtilityFamily::Log => (1.0, 0.0, 1.0),
            UtilityFamily::Power { delta } => (1.0 / (1.0 - delta), 0.0, 1.0),
            UtilityFamily::MeanVariance { k, c } => {
                if lambda == 0.0 {
                    return None;
                }
                (-1.0, c / (2.0 * k), -1.0 / (2.0 * k))
            }
            _ => return None,
        };
        Some(PowerForm {
            nu,
            c0,
            c1,
            lambda,
        })
    }

    pub fn calibrated(self, lambda: f64) -> CalibratedClaim {
        CalibratedClaim {
            claim: self,
            lambda,
        }
    }
}

/// `F(., lambda_J)` as a payoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibratedClaim {
    claim: ClaimFunction,
    lambda: f64,
}

impl CalibratedClaim {
    pub fn claim(&self) -> ClaimFunction {
        self.claim
    }

    pub fn spec(&self) -> UtilitySpec {
        self.claim.spec
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn power_form(&self) -> Option<PowerForm> {
        self.claim.power_form(self.lambda)
    }

    /// Whether the claim is the same constant for every `z`.
    pub fn is_constant(&self) -> bool {
        self.constant_on(0.0, f64::INFINITY).is_some()
    }

    /// Whether `F(., lambda)` has jumps.
    pub fn is_discontinuous(&self) -> bool {
        !self.breakpoints().is_empty()
    }
}

/// Relative slack when deciding on which side of a jump a panel lies; panel
/// ends computed from the jump itself may be off by rounding.
const EDGE_SLACK: f64 = 1e-9;

impl Payoff for CalibratedClaim {
    fn value(&self, z: f64) -> f64 {
        self.claim.value(z, self.lambda)
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.claim.breakpoints(self.lambda)
    }

    fn constant_on(&self, lo: f64, hi: f64) -> Option<f64> {
        match self.claim.spec.family {
            UtilityFamily::GoalAchieving { alpha } => {
                let b = self.lambda * alpha;
                if lo >= b * (1.0 - EDGE_SLACK) {
                    Some(alpha)
                } else if hi <= b * (1.0 + EDGE_SLACK) {
                    Some(0.0)
                } else {
                    None
                }
            }
            UtilityFamily::MeanVariance { k, c } if self.lambda == 0.0 => Some(c / (2.0 * k)),
            _ => None,
        }
    }
}

/// `U(F(z, lambda_J))` as a payoff, for expected utility under `P`.
struct UtilityOfClaim<'a>(&'a CalibratedClaim);

impl Payoff for UtilityOfClaim<'_> {
    fn value(&self, z: f64) -> f64 {
        let x = self.0.value(z);
        self.0.spec().utility(x).unwrap_or(f64::NEG_INFINITY)
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.0.breakpoints()
    }

    fn constant_on(&self, lo: f64, hi: f64) -> Option<f64> {
        self.0
            .constant_on(lo, hi)
            .and_then(|x| self.0.spec().utility(x))
    }
}

/// `E_* F(Z(T), lambda)` with `log Z(T) ~ Normal(-R/2, R)`.
pub fn budget(claim: &CalibratedClaim, risk: f64, quad: &NormalQuadrature) -> f64 {
    quad.lognormal(claim, -0.5 * risk, risk).mean
}

/// `E_* F(Z(T), lambda)` for the polynomial goal family in closed form:
/// `delta^{-l} sum_j C(l, j) (-lambda)^j exp(j (j + 1) R / 2)`.
fn poly_budget(l: u32, lambda: f64, risk: f64) -> f64 {
    let d = UtilitySpec::poly_delta(l);
    let mut binom = 1.0;
    let mut total = 0.0;
    for j in 0..=l {
        let jf = j as f64;
        total += binom * (-lambda).powi(j as i32) * (0.5 * jf * (jf + 1.0) * risk).exp();
        binom = binom * (l - j) as f64 / (jf + 1.0);
    }
    total * d.powi(-(l as i32))
}

/// Solves the budget constraint for `lambda_J`, then checks it by quadrature.
pub fn calibrate_lambda(
    spec: UtilitySpec,
    x0: f64,
    risk: f64,
    quad: &NormalQuadrature,
) -> Result<CalibratedClaim, UtilityError> {
    spec.check_initial_wealth(x0)?;
    if !(risk >= 0.0 && risk.is_finite()) {
        return Err(UtilityError::CalibrationFailed(format!("total risk {risk}")));
    }
    let lambda = match spec.family {
        UtilityFamily::Log => 1.0 / x0,
        UtilityFamily::Power { delta } => {
            x0.powf(delta - 1.0) * (delta / (1.0 - delta) * 0.5 * risk).exp()
        }
        UtilityFamily::MeanVariance { k, c } => (c - 2.0 * k * x0) * (-risk).exp(),
        UtilityFamily::PolynomialGoal { l } => poly_root(l, x0, risk)?,
        UtilityFamily::GoalAchieving { alpha } => {
            if risk <= 0.0 {
                return Err(UtilityError::GoalWithZeroRisk);
            }
            (risk.sqrt() * normal_quantile(1.0 - x0 / alpha) - alpha.ln() - 0.5 * risk).exp()
        }
    };
    let claim = pointwise_maximizer(spec).calibrated(lambda);
    let value = budget(&claim, risk, quad);
    if !((value - x0).abs() <= BUDGET_TOLERANCE * x0.abs().max(1.0)) {
        return Err(UtilityError::CalibrationFailed(format!(
            "budget check gives {value}, expected {x0} (lambda = {lambda})"
        )));
    }
    Ok(claim)
}

/// Negative root of the polynomial-goal budget equation. The budget is
/// increasing in `-lambda`, so the root is unique when it exists.
fn poly_root(l: u32, x0: f64, risk: f64) -> Result<f64, UtilityError> {
    let g = |lambda: f64| poly_budget(l, lambda, risk) - x0;
    if g(0.0) >= 0.0 {
        return Err(UtilityError::CalibrationFailed(
            "budget equation has no negative root".into(),
        ));
    }
    let mut lo = -1.0;
    let mut doublings = 0;
    while g(lo) <= 0.0 {
        lo *= 2.0;
        doublings += 1;
        if doublings > 200 || !lo.is_finite() {
            return Err(UtilityError::CalibrationFailed("root not bracketed".into()));
        }
    }
    let mut hi = 0.0;
    while hi - lo > ROOT_TOLERANCE * lo.abs().max(1.0) {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Points of the log-spaced growth test grid on `[1e-6, 1e6]`.
pub const GROWTH_GRID_POINTS: usize = 401;

/// Finds `(C, c0)` with `c0 < 1/(2J)` and `|f(z)| <= C z^{c0 log z}` on the
/// test grid. `preferred` is tried first, then `c0 = (1 - 2^-k) / (2J)` for
/// increasing `k`. A candidate is accepted when `|f(z)| z^{-c0 log z}` does
/// not rise in the outer tenths of the grid, so the bound keeps holding past
/// its ends.
pub fn certify_growth<F: Fn(f64) -> f64>(
    f: F,
    j: f64,
    preferred: Option<f64>,
) -> Result<GrowthBound, UtilityError> {
    if !(j > 0.0 && j.is_finite()) {
        return Err(UtilityError::NonPositiveRisk(j));
    }
    let limit = 0.5 / j;
    let (lo, hi) = (1e-6f64.ln(), 1e6f64.ln());
    let logs: Vec<f64> = (0..GROWTH_GRID_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (GROWTH_GRID_POINTS - 1) as f64)
        .collect();
    let values: Vec<f64> = logs.iter().map(|&y| f(y.exp()).abs()).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(UtilityError::GrowthBoundUnsatisfiable { limit });
    }
    let band = GROWTH_GRID_POINTS / 10;
    let candidates = preferred
        .into_iter()
        .filter(|&c| c > 0.0 && c < limit)
        .chain((1..=60).map(|k| limit * (1.0 - 0.5f64.powi(k))));
    for c0 in candidates {
        let ratio: Vec<f64> = logs
            .iter()
            .zip(&values)
            .map(|(&y, &v)| v * (-c0 * y * y).exp())
            .collect();
        let inner = ratio[band..GROWTH_GRID_POINTS - band]
            .iter()
            .cloned()
            .fold(0.0, f64::max);
        let outer = ratio[..band]
            .iter()
            .chain(&ratio[GROWTH_GRID_POINTS - band..])
            .cloned()
            .fold(0.0, f64::max);
        if outer <= inner * (1.0 + 1e-12) {
            return Ok(GrowthBound {
                c: inner.max(f64::MIN_POSITIVE),
                c0,
            });
        }
    }
    Err(UtilityError::GrowthBoundUnsatisfiable { limit })
}

/// Growth constants for a calibrated claim, preferring `c0 = 1/(4J)`; the
/// bounded goal-achieving claim uses `C = alpha`, `c0 = min(1e-3, 1/(4J))`.
pub fn check_growth_bound(claim: &CalibratedClaim, j: f64) -> Result<GrowthBound, UtilityError> {
    if !(j > 0.0 && j.is_finite()) {
        return Err(UtilityError::NonPositiveRisk(j));
    }
    let quarter = 0.25 / j;
    if let UtilityFamily::GoalAchieving { alpha } = claim.spec().family {
        return Ok(GrowthBound {
            c: alpha,
            c0: quarter.min(1e-3),
        });
    }
    certify_growth(|z| claim.value(z), j, Some(quarter))
}

/// Monte Carlo expected utility with the number of samples left out because
/// they fall outside the domain or have infinite utility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityEstimate {
    pub estimate: Estimate,
    pub excluded: usize,
}

/// Sample mean and standard error of `U(x)` over `samples`.
pub fn expected_utility(spec: UtilitySpec, samples: &[f64]) -> Result<UtilityEstimate, UtilityError> {
    let moments = chunked_moments(samples.len(), |i| spec.utility(samples[i]));
    if moments.count() == 0 {
        return Err(UtilityError::EmptySample);
    }
    Ok(UtilityEstimate {
        estimate: moments.estimate(),
        excluded: samples.len() - moments.count() as usize,
    })
}

/// `E U(F(Z(T), lambda_J))` under `P`, where `log Z(T) ~ Normal(R/2, R)`.
pub fn expected_utility_quadrature(claim: &CalibratedClaim, risk: f64, quad: &NormalQuadrature) -> f64 {
    quad.lognormal(&UtilityOfClaim(claim), 0.5 * risk, risk).mean
}
