//! Portfolio compression: restricting the optimal portfolio to a subset of
//! the stocks and choosing the subset that keeps the most risk.
//!
//! For a subset `I` with projector `P_I`, the restricted inverse `Q_I` is the
//! inverse of the principal submatrix `V[I, I]` scattered back into an
//! `n x n` matrix. The compressed market keeps `r` and `sigma` and replaces
//! the drift with `a_I = r 1 + V Q_I P_I a~`, so that its price of risk is
//! `theta_I = sigma^T Q_I P_I a~` and `|theta_I|^2 = a~^T Q_I a~`.

use crate::market::{MarketError, MarketParams};
use crate::simulate::ScenarioMixture;
use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use std::fmt;
use thiserror::Error;

/// Subsets enumerated by [`select_subset`] before it refuses.
pub const DEFAULT_SUBSET_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompressError {
    #[error("subset must be non-empty")]
    EmptySubset,
    #[error("stock index {index} out of range for {n} stocks")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("stock index {0} repeated")]
    DuplicateIndex(usize),
    #[error("subset size m = {m} must lie in 1..={n}")]
    BadSubsetSize { m: usize, n: usize },
    #[error("{count} candidate subsets exceed the cap of {cap}")]
    SubsetSpaceTooLarge { count: u128, cap: u64 },
    #[error("principal submatrix for subset {0} is not positive definite")]
    Singular(Subset),
    #[error("policy has {policy} intervals, market has {market}")]
    IntervalMismatch { policy: usize, market: usize },
    #[error(transparent)]
    Market(#[from] MarketError),
}

/// Sorted set of distinct stock indices, 0-based. Displayed 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Subset(Vec<usize>);

impl Subset {
    pub fn new(mut indices: Vec<usize>, n: usize) -> Result<Self, CompressError> {
        if indices.is_empty() {
            return Err(CompressError::EmptySubset);
        }
        indices.sort_unstable();
        for w in indices.windows(2) {
            if w[0] == w[1] {
                return Err(CompressError::DuplicateIndex(w[0]));
            }
        }
        if let Some(&index) = indices.last().filter(|&&i| i >= n) {
            return Err(CompressError::IndexOutOfRange { index, n });
        }
        Ok(Self(indices))
    }

    /// All `n` stocks.
    pub fn full(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.binary_search(&i).is_ok()
    }

    /// Indices as written in reports, starting at 1.
    pub fn one_based(&self) -> Vec<usize> {
        self.0.iter().map(|i| i + 1).collect()
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}", self.one_based().iter().join(","))
    }
}

/// Diagonal 0/1 projector onto the coordinates in `subset`.
pub fn projector(subset: &Subset, n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    for &i in subset.indices() {
        p[(i, i)] = 1.0;
    }
    p
}

fn principal(v: &DMatrix<f64>, subset: &Subset) -> DMatrix<f64> {
    let idx = subset.indices();
    DMatrix::from_fn(idx.len(), idx.len(), |a, b| v[(idx[a], idx[b])])
}

/// `Q_I`: inverse of `V[I, I]` embedded in the `I x I` block, zero elsewhere.
pub fn restricted_inverse(v: &DMatrix<f64>, subset: &Subset) -> Result<DMatrix<f64>, CompressError> {
    let n = v.nrows();
    if let Some(&index) = subset.indices().last().filter(|&&i| i >= n) {
        return Err(CompressError::IndexOutOfRange { index, n });
    }
    let inv = principal(v, subset)
        .cholesky()
        .ok_or_else(|| CompressError::Singular(subset.clone()))?
        .inverse();
    let idx = subset.indices();
    let mut q = DMatrix::zeros(n, n);
    for (a, &i) in idx.iter().enumerate() {
        for (b, &j) in idx.iter().enumerate() {
            q[(i, j)] = inv[(a, b)];
        }
    }
    Ok(q)
}

/// `a_I = r 1 + V Q_I P_I (a - r 1)`.
pub fn compressed_drift(
    a: &DVector<f64>,
    r: f64,
    v: &DMatrix<f64>,
    subset: &Subset,
) -> Result<DVector<f64>, CompressError> {
    let n = a.len();
    let q = restricted_inverse(v, subset)?;
    let excess = a.map(|x| x - r);
    let mut drift = v * (q * (projector(subset, n) * excess)) + DVector::from_element(n, r);
    // P_I a_I = P_I a holds analytically; keep it exact
    for &i in subset.indices() {
        drift[i] = a[i];
    }
    Ok(drift)
}

/// `a~_I^T V[I, I]^{-1} a~_I`, the risk rate kept by `subset`.
fn subset_value(v: &DMatrix<f64>, excess: &DVector<f64>, subset: &Subset) -> Result<f64, CompressError> {
    let idx = subset.indices();
    let e = DVector::from_iterator(idx.len(), idx.iter().map(|&i| excess[i]));
    let chol = principal(v, subset)
        .cholesky()
        .ok_or_else(|| CompressError::Singular(subset.clone()))?;
    Ok(e.dot(&chol.solve(&e)))
}

/// Compression quantities of one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSelection {
    pub subset: Subset,
    pub projector: DMatrix<f64>,
    pub restricted_inverse: DMatrix<f64>,
    /// Compressed drift `a_I`.
    pub drift: DVector<f64>,
    /// `a~^T Q_I a~`.
    pub value: f64,
}

/// A subset per grid interval, with the derived compressed market.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetPolicy {
    intervals: Vec<IntervalSelection>,
    risk: f64,
}

impl SubsetPolicy {
    /// Uses `subsets[k]` on interval `k`.
    pub fn from_subsets(params: &MarketParams, subsets: Vec<Subset>) -> Result<Self, CompressError> {
        if subsets.len() != params.intervals() {
            return Err(CompressError::IntervalMismatch {
                policy: subsets.len(),
                market: params.intervals(),
            });
        }
        let n = params.n();
        let mut risk = 0.0;
        let mut intervals = Vec::with_capacity(subsets.len());
        for (k, subset) in subsets.into_iter().enumerate() {
            let sigma = &params.vols()[k];
            let v = sigma * sigma.transpose();
            let excess = params.excess_drift(k);
            let q = restricted_inverse(&v, &subset)?;
            let p = projector(&subset, n);
            let drift = compressed_drift(&params.drifts()[k], params.rates()[k], &v, &subset)?;
            let value = excess.dot(&(&q * &excess));
            risk += value * params.interval_length(k);
            intervals.push(IntervalSelection {
                subset,
                projector: p,
                restricted_inverse: q,
                drift,
                value,
            });
        }
        Ok(Self { intervals, risk })
    }

    /// Same subset on every interval.
    pub fn constant(params: &MarketParams, subset: Subset) -> Result<Self, CompressError> {
        Self::from_subsets(params, vec![subset; params.intervals()])
    }

    pub fn interval(&self, k: usize) -> &IntervalSelection {
        &self.intervals[k]
    }

    pub fn intervals(&self) -> &[IntervalSelection] {
        &self.intervals
    }

    pub fn subsets(&self) -> Vec<Subset> {
        self.intervals.iter().map(|s| s.subset.clone()).collect()
    }

    /// `R_I = int a~^T Q_I a~ dt` on the market the policy was built for.
    pub fn risk(&self) -> f64 {
        self.risk
    }

    /// The original market with drift replaced by `a_I`.
    pub fn compressed_market(&self, params: &MarketParams) -> Result<MarketParams, CompressError> {
        if self.intervals.len() != params.intervals() {
            return Err(CompressError::IntervalMismatch {
                policy: self.intervals.len(),
                market: params.intervals(),
            });
        }
        Ok(params.with_drifts(self.intervals.iter().map(|s| s.drift.clone()).collect())?)
    }
}

/// Number of non-empty subsets of size at most `m` out of `n`, saturating.
pub fn subset_count(n: usize, m: usize) -> u128 {
    let mut total = 0u128;
    let mut binom = 1u128;
    for i in 0..m.min(n) {
        binom = match binom.checked_mul((n - i) as u128) {
            Some(b) => b / (i as u128 + 1),
            None => return u128::MAX,
        };
        total = total.saturating_add(binom);
    }
    total
}

/// All non-empty subsets of size at most `m`, in lexicographic order.
pub fn enumerate_subsets(n: usize, m: usize) -> Vec<Subset> {
    let mut all: Vec<Subset> = (1..=m.min(n))
        .flat_map(|j| (0..n).combinations(j).map(Subset))
        .collect();
    all.sort();
    all
}

/// Per interval, the subset of size at most `m` maximizing `a~^T Q_I a~`.
/// Ties go to the lexicographically smallest subset.
pub fn select_subset(params: &MarketParams, m: usize, cap: u64) -> Result<SubsetPolicy, CompressError> {
    let n = params.n();
    if m == 0 || m > n {
        return Err(CompressError::BadSubsetSize { m, n });
    }
    let count = subset_count(n, m);
    if count > cap as u128 {
        return Err(CompressError::SubsetSpaceTooLarge { count, cap });
    }
    let candidates = enumerate_subsets(n, m);
    let mut chosen = Vec::with_capacity(params.intervals());
    for k in 0..params.intervals() {
        let sigma = &params.vols()[k];
        let v = sigma * sigma.transpose();
        let excess = params.excess_drift(k);
        let best = candidates
            .par_iter()
            .map(|s| subset_value(&v, &excess, s).map(|val| (val, s)))
            .try_reduce_with(|a, b| Ok(better(a, b)))
            .expect("at least one candidate")?;
        chosen.push(best.1.clone());
    }
    SubsetPolicy::from_subsets(params, chosen)
}

fn better<'a>(a: (f64, &'a Subset), b: (f64, &'a Subset)) -> (f64, &'a Subset) {
    if a.0 > b.0 || (a.0 == b.0 && a.1 <= b.1) {
        a
    } else {
        b
    }
}

/// `R_I` of `policy`'s subsets evaluated on `params`.
pub fn subset_risk(params: &MarketParams, policy: &SubsetPolicy) -> Result<f64, CompressError> {
    Ok(SubsetPolicy::from_subsets(params, policy.subsets())?.risk())
}

/// Whether `first` dominates `second`: `R_1 >= R_2` in every scenario of
/// `market`, strictly in at least one scenario of positive probability.
pub fn dominates(
    first: &SubsetPolicy,
    second: &SubsetPolicy,
    market: &ScenarioMixture,
) -> Result<bool, CompressError> {
    let mut strict = false;
    for (params, &p) in market.scenarios().iter().zip(market.probabilities()) {
        let (r1, r2) = (subset_risk(params, first)?, subset_risk(params, second)?);
        if r1 < r2 {
            return Ok(false);
        }
        strict |= r1 > r2 && p > 0.0;
    }
    Ok(strict)
}
