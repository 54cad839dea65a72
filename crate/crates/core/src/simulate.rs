//! Path ensembles of the driving noise, the density `Z`, discounted prices
//! and strategy-driven wealth.
//!
//! Every path is regenerated on demand from its own random stream, keyed by
//! `(seed, path index)`, so ensembles are reproducible for any thread count
//! and need no storage proportional to `paths x steps`.
//!
//! `Z` is advanced by the exact exponential of its Gaussian log-increments,
//! `log Z += theta . dw_* - |theta|^2 dt / 2`, where under the physical
//! measure `dw_* = dw + theta dt`.

use crate::market::{compute_metrics, MarketError, MarketParams, RiskMetrics};
use crate::replicate::Strategy;
use crate::stats::chunked_fold;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Mixes the seed of the scenario stream away from the Gaussian streams.
const SCENARIO_STREAM_KEY: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    BadConfig(String),
    #[error("invalid scenario mixture: {0}")]
    BadMixture(String),
    #[error("strategy does not fit the ensemble: {0}")]
    Mismatch(String),
    #[error("path {path} left the wealth domain at t = {time}")]
    DomainExit { path: usize, time: f64 },
    #[error(transparent)]
    Market(#[from] MarketError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Measure {
    /// Increments drive `w`.
    Physical,
    /// Increments drive `w_*`.
    #[default]
    Martingale,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub paths: usize,
    /// Steps per grid interval.
    pub steps: usize,
    pub seed: u64,
    pub measure: Measure,
    /// Positions are closed on `[T - eps, T]`, in addition to any cutoff the
    /// strategy itself carries.
    pub cutoff_epsilon: f64,
}

impl SimConfig {
    pub fn new(paths: usize, steps: usize, seed: u64) -> Self {
        Self {
            paths,
            steps,
            seed,
            measure: Measure::Martingale,
            cutoff_epsilon: 0.0,
        }
    }

    pub fn with_measure(mut self, measure: Measure) -> Self {
        self.measure = measure;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_cutoff(mut self, epsilon: f64) -> Self {
        self.cutoff_epsilon = epsilon;
        self
    }

    pub fn validate(&self, horizon: f64) -> Result<(), SimError> {
        if self.paths == 0 {
            return Err(SimError::BadConfig("paths must be at least 1".into()));
        }
        if self.steps == 0 {
            return Err(SimError::BadConfig("steps must be at least 1".into()));
        }
        if !(self.cutoff_epsilon >= 0.0 && self.cutoff_epsilon < horizon) {
            return Err(SimError::BadConfig(format!(
                "epsilon {} must lie in [0, {horizon})",
                self.cutoff_epsilon
            )));
        }
        Ok(())
    }
}

/// Finitely many coefficient scenarios, drawn once per path independently of
/// the driving noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioMixture {
    scenarios: Vec<MarketParams>,
    probabilities: Vec<f64>,
}

impl ScenarioMixture {
    pub fn new(entries: Vec<(MarketParams, f64)>) -> Result<Self, SimError> {
        let Some((first, _)) = entries.first() else {
            return Err(SimError::BadMixture("no scenarios".into()));
        };
        for (i, (p, w)) in entries.iter().enumerate() {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(SimError::BadMixture(format!("scenario {i} has probability {w}")));
            }
            if p.n() != first.n() || p.grid() != first.grid() {
                return Err(SimError::BadMixture(format!(
                    "scenario {i} differs from scenario 0 in n or grid"
                )));
            }
        }
        let total: f64 = entries.iter().map(|e| e.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(SimError::BadMixture(format!("probabilities sum to {total}")));
        }
        let (scenarios, probabilities) = entries.into_iter().unzip();
        Ok(Self {
            scenarios,
            probabilities,
        })
    }

    pub fn single(params: MarketParams) -> Self {
        Self {
            scenarios: vec![params],
            probabilities: vec![1.0],
        }
    }

    pub fn scenarios(&self) -> &[MarketParams] {
        &self.scenarios
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.scenarios.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenarios.is_empty()
    }
}

impl From<MarketParams> for ScenarioMixture {
    fn from(params: MarketParams) -> Self {
        Self::single(params)
    }
}

/// Simulation times: `steps` equal steps inside every grid interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
    interval: Vec<usize>,
}

impl TimeGrid {
    pub fn new(grid: &[f64], steps: usize) -> Self {
        let mut times = vec![grid[0]];
        let mut interval = Vec::new();
        for k in 0..grid.len() - 1 {
            let (a, b) = (grid[k], grid[k + 1]);
            for j in 1..=steps {
                times.push(if j == steps {
                    b
                } else {
                    a + (b - a) * j as f64 / steps as f64
                });
                interval.push(k);
            }
        }
        Self { times, interval }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn steps(&self) -> usize {
        self.interval.len()
    }

    /// Grid interval containing step `j`.
    pub fn interval_of(&self, j: usize) -> usize {
        self.interval[j]
    }

    pub fn dt(&self, j: usize) -> f64 {
        self.times[j + 1] - self.times[j]
    }
}

/// A simulated ensemble. Paths are generated lazily by [`PathEnsemble::path`].
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    mixture: ScenarioMixture,
    metrics: Vec<RiskMetrics>,
    cumulative: Vec<f64>,
    config: SimConfig,
    grid: TimeGrid,
    n: usize,
    x0: f64,
}

/// One path: drawn increments (of `w_*` under `P_*`, of `w` under `P`) and
/// the log-density of the ensemble's market.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub index: usize,
    pub scenario: usize,
    /// `steps x n`, row-major by step.
    pub increments: Vec<f64>,
    /// `log Z(t_j)` for every simulation time.
    pub log_z: Vec<f64>,
}

impl SamplePath {
    pub fn increment(&self, j: usize, n: usize) -> &[f64] {
        &self.increments[j * n..(j + 1) * n]
    }

    pub fn z(&self, j: usize) -> f64 {
        self.log_z[j].exp()
    }

    pub fn z_star(&self, j: usize) -> f64 {
        (-self.log_z[j]).exp()
    }
}

/// Simulates an ensemble for a market or a scenario mixture.
pub fn simulate_ensemble(
    market: impl Into<ScenarioMixture>,
    config: SimConfig,
) -> Result<PathEnsemble, SimError> {
    let mixture = market.into();
    let first = &mixture.scenarios[0];
    config.validate(first.horizon())?;
    let metrics = mixture
        .scenarios
        .iter()
        .map(compute_metrics)
        .collect::<Result<Vec<_>, _>>()?;
    let mut acc = 0.0;
    let cumulative = mixture
        .probabilities
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    Ok(PathEnsemble {
        grid: TimeGrid::new(first.grid(), config.steps),
        n: first.n(),
        x0: first.x0(),
        mixture,
        metrics,
        cumulative,
        config,
    })
}

/// Increment of `w_*` of a market with price of risk `theta` given the
/// drawn increment of a market with price of risk `theta_ref`.
fn star_increment(
    measure: Measure,
    drawn: &[f64],
    theta: &DVector<f64>,
    theta_ref: &DVector<f64>,
    dt: f64,
    out: &mut [f64],
) {
    match measure {
        Measure::Martingale => {
            for i in 0..drawn.len() {
                out[i] = drawn[i] + (theta[i] - theta_ref[i]) * dt;
            }
        }
        Measure::Physical => {
            for i in 0..drawn.len() {
                out[i] = drawn[i] + theta[i] * dt;
            }
        }
    }
}

fn log_increment(theta: &DVector<f64>, theta_sq: f64, dw_star: &[f64], dt: f64) -> f64 {
    let drive: f64 = theta.iter().zip(dw_star).map(|(a, b)| a * b).sum();
    drive - 0.5 * theta_sq * dt
}

impl PathEnsemble {
    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.config.paths
    }

    pub fn is_empty(&self) -> bool {
        self.config.paths == 0
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn measure(&self) -> Measure {
        self.config.measure
    }

    pub fn time_grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        self.grid.times()
    }

    pub fn mixture(&self) -> &ScenarioMixture {
        &self.mixture
    }

    pub fn metrics(&self, scenario: usize) -> &RiskMetrics {
        &self.metrics[scenario]
    }

    pub fn scenarios(&self) -> usize {
        self.mixture.len()
    }

    /// Scenario of path `index`, from a stream separate from the increments.
    pub fn scenario_of(&self, index: usize) -> usize {
        if self.cumulative.len() == 1 {
            return 0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ SCENARIO_STREAM_KEY);
        rng.set_stream(index as u64);
        let u: f64 = rng.random();
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }

    fn draw(&self, index: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(index as u64);
        let mut out = Vec::with_capacity(self.grid.steps() * self.n);
        for j in 0..self.grid.steps() {
            let sd = self.grid.dt(j).sqrt();
            for _ in 0..self.n {
                let u: f64 = rng.sample(StandardNormal);
                out.push(sd * u);
            }
        }
        out
    }

    /// Regenerates path `index`.
    pub fn path(&self, index: usize) -> SamplePath {
        let scenario = self.scenario_of(index);
        let increments = self.draw(index);
        let metrics = &self.metrics[scenario];
        let mut log_z = Vec::with_capacity(self.grid.steps() + 1);
        log_z.push(0.0);
        let mut dws = vec![0.0; self.n];
        for j in 0..self.grid.steps() {
            let iv = metrics.interval(self.grid.interval_of(j));
            let dt = self.grid.dt(j);
            star_increment(
                self.config.measure,
                &increments[j * self.n..(j + 1) * self.n],
                &iv.theta,
                &iv.theta,
                dt,
                &mut dws,
            );
            log_z.push(log_z[j] + log_increment(&iv.theta, iv.theta_sq, &dws, dt));
        }
        SamplePath {
            index,
            scenario,
            increments,
            log_z,
        }
    }

    /// Discounted prices `S~(t_j)` along `path`, advanced exactly:
    /// `S~_i *= exp(sigma_i . dw_* - |sigma_i|^2 dt / 2)`.
    pub fn discounted_prices(&self, path: &SamplePath) -> Vec<DVector<f64>> {
        let params = &self.mixture.scenarios[path.scenario];
        let metrics = &self.metrics[path.scenario];
        let mut s = params.s0().clone();
        let mut out = Vec::with_capacity(self.grid.steps() + 1);
        out.push(s.clone());
        let mut dws = vec![0.0; self.n];
        for j in 0..self.grid.steps() {
            let k = self.grid.interval_of(j);
            let iv = metrics.interval(k);
            let dt = self.grid.dt(j);
            star_increment(self.config.measure, path.increment(j, self.n), &iv.theta, &iv.theta, dt, &mut dws);
            let sigma = &params.vols()[k];
            for i in 0..self.n {
                let row = sigma.row(i);
                let drive: f64 = row.iter().zip(&dws).map(|(a, b)| a * b).sum();
                s[i] *= (drive - 0.5 * row.norm_squared() * dt).exp();
            }
            out.push(s.clone());
        }
        out
    }

    /// Terminal `Z(T)` of every path, in path order.
    pub fn terminal_density(&self) -> Vec<f64> {
        self.map_paths(|p| p.z(p.log_z.len() - 1))
    }

    /// Applies `f` to every path in parallel; results are in path order.
    pub fn map_paths<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(&SamplePath) -> T + Sync,
    {
        chunked_fold(self.len(), Vec::new, |acc, i| acc.push(f(&self.path(i))))
            .into_iter()
            .flatten()
            .collect()
    }
}

/// A seed for an independent ensemble, derived from `seed` and a stream
/// number by SplitMix64 mixing.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(stream))
}

/// `E_* Z(T)^q = exp(q (q - 1) R / 2)` for deterministic `theta`.
pub fn moment_oracle(q: f64, risk: f64) -> f64 {
    (0.5 * q * (q - 1.0) * risk).exp()
}

/// First time a path's wealth left the domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainExit {
    pub path: usize,
    pub time: f64,
}

/// Normalized wealth and strategy-market density along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct WealthPath {
    pub scenario: usize,
    pub wealth: Vec<f64>,
    /// Density `Z` of the market the strategy is optimal in.
    pub density: Vec<f64>,
    pub exit: Option<DomainExit>,
}

/// Terminal results of a wealth simulation over a whole ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct WealthEnsemble {
    /// `X~(T)` per path.
    pub terminal: Vec<f64>,
    /// `Z(T)` of the strategy market per path.
    pub density: Vec<f64>,
    /// `X~` and strategy density at the freeze time `T - eps` (or `T`).
    pub frozen_wealth: Vec<f64>,
    pub frozen_density: Vec<f64>,
    pub freeze_time: f64,
    pub exits: Vec<DomainExit>,
}

impl WealthEnsemble {
    /// Terminal wealth of the paths that never left the domain.
    pub fn admissible_terminal(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.terminal.len());
        let mut exits = self.exits.iter().map(|e| e.path).peekable();
        for (i, &x) in self.terminal.iter().enumerate() {
            if exits.peek() == Some(&i) {
                exits.next();
            } else {
                out.push(x);
            }
        }
        out
    }

    pub fn ensure_in_domain(&self) -> Result<(), SimError> {
        match self.exits.first() {
            None => Ok(()),
            Some(e) => Err(SimError::DomainExit {
                path: e.path,
                time: e.time,
            }),
        }
    }
}

struct PathRun {
    terminal: f64,
    density: f64,
    frozen_wealth: f64,
    frozen_density: f64,
    exit: Option<f64>,
}

fn check_fit(strategy: &Strategy, ensemble: &PathEnsemble) -> Result<(), SimError> {
    if strategy.legs().len() != ensemble.scenarios() {
        return Err(SimError::Mismatch(format!(
            "{} strategy legs for {} scenarios",
            strategy.legs().len(),
            ensemble.scenarios()
        )));
    }
    for (s, leg) in strategy.legs().iter().enumerate() {
        let m = leg.metrics();
        if m.grid() != ensemble.metrics(s).grid() {
            return Err(SimError::Mismatch(format!("leg {s} uses a different grid")));
        }
        if leg.exposure().direction(0).len() != ensemble.n() {
            return Err(SimError::Mismatch(format!("leg {s} trades a different number of stocks")));
        }
    }
    Ok(())
}

/// First time from which positions are closed: `T - eps` for the larger of
/// the strategy's and the run's cutoff, or infinity without a cutoff.
fn freeze_time(strategy: &Strategy, ensemble: &PathEnsemble) -> f64 {
    let horizon = strategy.horizon();
    let eps = strategy.cutoff().max(ensemble.config.cutoff_epsilon);
    if eps > 0.0 {
        horizon - eps - 1e-12 * horizon
    } else {
        f64::INFINITY
    }
}

fn run_path(
    strategy: &Strategy,
    ensemble: &PathEnsemble,
    path: &SamplePath,
    x0: f64,
    mut record: impl FnMut(usize, f64, f64),
) -> PathRun {
    let n = ensemble.n;
    let grid = &ensemble.grid;
    let leg = strategy.leg(path.scenario);
    let reference = ensemble.metrics(path.scenario);
    let domain = strategy.domain();
    let mut x = x0;
    let mut log_z = 0.0;
    let mut z = 1.0;
    let mut exit = None;
    let mut frozen = None;
    let mut dws = vec![0.0; n];
    let freeze = freeze_time(strategy, ensemble);
    record(0, x, z);
    for j in 0..grid.steps() {
        let t = grid.times[j];
        let k = grid.interval_of(j);
        let dt = grid.dt(j);
        let iv = leg.metrics().interval(k);
        star_increment(
            ensemble.config.measure,
            path.increment(j, n),
            &iv.theta,
            &reference.interval(k).theta,
            dt,
            &mut dws,
        );
        log_z += log_increment(&iv.theta, iv.theta_sq, &dws, dt);
        let z_next = log_z.exp();
        if frozen.is_none() && t >= freeze {
            frozen = Some((x, z));
        }
        if frozen.is_none() {
            x = leg.advance(k, t, dt, &dws, z, z_next, x);
        }
        z = z_next;
        if exit.is_none() && !domain.contains(x) {
            exit = Some(grid.times[j + 1]);
        }
        record(j + 1, x, z);
    }
    let (frozen_wealth, frozen_density) = frozen.unwrap_or((x, z));
    PathRun {
        terminal: x,
        density: z,
        frozen_wealth,
        frozen_density,
        exit,
    }
}

/// Runs `strategy` on every path of `ensemble` starting from `x0`.
///
/// Positions are held over each step and wealth is advanced with the step's
/// increments; see [`crate::replicate::StrategyLeg`] for the per-rule update.
/// Paths leaving the strategy's domain are recorded, not clipped.
pub fn evolve_wealth(
    strategy: &Strategy,
    ensemble: &PathEnsemble,
    x0: f64,
) -> Result<WealthEnsemble, SimError> {
    check_fit(strategy, ensemble)?;
    let runs = ensemble.map_paths(|p| (p.index, run_path(strategy, ensemble, p, x0, |_, _, _| {})));
    let freeze = freeze_time(strategy, ensemble);
    let freeze_time = ensemble
        .times()
        .iter()
        .copied()
        .find(|&t| t >= freeze)
        .unwrap_or(strategy.horizon());
    let mut out = WealthEnsemble {
        terminal: Vec::with_capacity(runs.len()),
        density: Vec::with_capacity(runs.len()),
        frozen_wealth: Vec::with_capacity(runs.len()),
        frozen_density: Vec::with_capacity(runs.len()),
        freeze_time,
        exits: Vec::new(),
    };
    for (path, r) in runs {
        out.terminal.push(r.terminal);
        out.density.push(r.density);
        out.frozen_wealth.push(r.frozen_wealth);
        out.frozen_density.push(r.frozen_density);
        if let Some(time) = r.exit {
            out.exits.push(DomainExit { path, time });
        }
    }
    Ok(out)
}

/// Full wealth and density trajectory of path `index`.
pub fn wealth_path(
    strategy: &Strategy,
    ensemble: &PathEnsemble,
    index: usize,
    x0: f64,
) -> Result<WealthPath, SimError> {
    check_fit(strategy, ensemble)?;
    let path = ensemble.path(index);
    let steps = ensemble.grid.steps();
    let mut wealth = vec![0.0; steps + 1];
    let mut density = vec![0.0; steps + 1];
    let run = run_path(strategy, ensemble, &path, x0, |j, x, z| {
        wealth[j] = x;
        density[j] = z;
    });
    Ok(WealthPath {
        scenario: path.scenario,
        wealth,
        density,
        exit: run.exit.map(|time| DomainExit { path: index, time }),
    })
}
