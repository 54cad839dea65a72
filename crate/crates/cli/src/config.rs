//! Run configuration, read from a single TOML file.
//!
//! Sections: `market`, `utility`, `compress`, `sim`, `pde`, `[[scenario]]`,
//! `output` and `verify`. Per-interval market inputs accept either one value
//! shared by every interval or a list with one value per interval. Volatility
//! matrices are row-major. Stock indices in `verify` are 1-based.

use std::path::{Path, PathBuf};

use optfolio::compress::{Subset, DEFAULT_SUBSET_CAP};
use optfolio::quadrature::{DEFAULT_NODES, DEFAULT_TRUNCATION};
use optfolio::{
    validate_market, DMatrix, DVector, MarketParams, Measure, NormalQuadrature, QuadConfig, ScenarioMixture,
    SimConfig, UtilityFamily, UtilitySpec,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// One value for every interval, or one per interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerInterval<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> PerInterval<T> {
    fn expand(&self, field: &str, intervals: usize) -> Result<Vec<(String, T)>, CliError> {
        match self {
            PerInterval::One(v) => Ok((0..intervals).map(|_| (field.to_string(), v.clone())).collect()),
            PerInterval::Many(vs) if vs.len() == intervals => Ok(vs
                .iter()
                .enumerate()
                .map(|(k, v)| (format!("{field}[{k}]"), v.clone()))
                .collect()),
            PerInterval::Many(vs) => Err(CliError::config(format!(
                "{field}: expected one value or {intervals} (one per interval), got {}",
                vs.len()
            ))),
        }
    }
}

fn default_rate() -> PerInterval<f64> {
    PerInterval::One(0.0)
}

fn default_x0() -> f64 {
    1.0
}

fn default_c1() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub n: usize,
    pub horizon: f64,
    /// Interval end points from 0 to `horizon`; defaults to `[0, horizon]`.
    pub grid: Option<Vec<f64>>,
    #[serde(default = "default_rate")]
    pub rate: PerInterval<f64>,
    pub drift: PerInterval<Vec<f64>>,
    pub vol: PerInterval<Vec<f64>>,
    /// Defaults to 1 for every stock.
    pub s0: Option<Vec<f64>>,
    #[serde(default = "default_x0")]
    pub x0: f64,
    #[serde(default = "default_c1")]
    pub c1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilitySection {
    Log,
    Power { delta: f64 },
    MeanVariance { k: f64, c: f64 },
    PolynomialGoal { l: u32 },
    Goal { alpha: f64 },
}

impl UtilitySection {
    fn family(self) -> UtilityFamily {
        match self {
            UtilitySection::Log => UtilityFamily::Log,
            UtilitySection::Power { delta } => UtilityFamily::Power { delta },
            UtilitySection::MeanVariance { k, c } => UtilityFamily::MeanVariance { k, c },
            UtilitySection::PolynomialGoal { l } => UtilityFamily::PolynomialGoal { l },
            UtilitySection::Goal { alpha } => UtilityFamily::GoalAchieving { alpha },
        }
    }
}

fn default_cap() -> u64 {
    DEFAULT_SUBSET_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressSection {
    /// Most stocks held; defaults to `n`.
    pub m: Option<usize>,
    #[serde(default = "default_cap")]
    pub cap: u64,
}

impl Default for CompressSection {
    fn default() -> Self {
        Self {
            m: None,
            cap: default_cap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasureName {
    Martingale,
    Physical,
}

fn default_paths() -> usize {
    10_000
}

fn default_steps() -> usize {
    100
}

fn default_measure() -> MeasureName {
    MeasureName::Martingale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    #[serde(default = "default_paths")]
    pub paths: usize,
    /// Steps per grid interval.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_measure")]
    pub measure: MeasureName,
    /// Trading stops at `T - epsilon`; defaults to `1e-3 T` for goal-achieving
    /// utility and 0 otherwise.
    pub epsilon: Option<f64>,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            paths: default_paths(),
            steps: default_steps(),
            seed: 0,
            measure: default_measure(),
            epsilon: None,
        }
    }
}

fn default_nodes() -> usize {
    DEFAULT_NODES
}

fn default_truncation() -> f64 {
    DEFAULT_TRUNCATION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSection {
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    #[serde(default = "default_truncation")]
    pub truncation_sigmas: f64,
}

impl Default for PdeSection {
    fn default() -> Self {
        Self {
            nodes: default_nodes(),
            truncation_sigmas: default_truncation(),
        }
    }
}

/// Coefficient overrides for one scenario of a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub probability: f64,
    pub rate: Option<PerInterval<f64>>,
    pub drift: Option<PerInterval<Vec<f64>>>,
    pub vol: Option<PerInterval<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            formats: default_formats(),
        }
    }
}

fn default_replication_tolerance() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Subset with the smaller risk in the dominance and augmented-market
    /// checks (1-based).
    pub subset: Option<Vec<usize>>,
    /// Subset with the larger risk (1-based).
    pub better: Option<Vec<usize>>,
    /// Largest root mean square relative replication gap accepted for
    /// strategies that are not replicated exactly.
    #[serde(default = "default_replication_tolerance")]
    pub replication_tolerance: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            subset: None,
            better: None,
            replication_tolerance: default_replication_tolerance(),
        }
    }
}

/// The file as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub market: MarketSection,
    pub utility: Option<UtilitySection>,
    #[serde(default)]
    pub compress: CompressSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub pde: PdeSection,
    #[serde(default)]
    pub scenario: Vec<ScenarioSection>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub verify: VerifySection,
}

/// Validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub raw: RawConfig,
    /// The `market` section itself.
    pub market: MarketParams,
    /// The scenarios, or the market alone when none are given.
    pub mixture: ScenarioMixture,
    pub utility: Option<UtilitySpec>,
    pub m: usize,
    pub cap: u64,
    pub sim: SimConfig,
    pub epsilon: Option<f64>,
    pub quad: QuadConfig,
    pub out_dir: PathBuf,
    pub csv: bool,
    pub json: bool,
    pub subset: Option<Subset>,
    pub better: Option<Subset>,
    pub replication_tolerance: f64,
    /// SHA-256 of the effective configuration, excluding the output
    /// directory.
    pub hash: String,
}

impl RunConfig {
    pub fn load(path: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, seed)
    }

    pub fn parse(text: &str, seed: Option<u64>) -> Result<Self, CliError> {
        let mut raw: RawConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        if let Some(seed) = seed {
            raw.sim.seed = seed;
        }
        Self::from_raw(raw)
    }

    pub fn utility(&self) -> Result<UtilitySpec, CliError> {
        self.utility
            .ok_or_else(|| CliError::config("utility: section required for this command"))
    }

    pub fn from_raw(raw: RawConfig) -> Result<Self, CliError> {
        let mk = &raw.market;
        let market = build_market(mk, None, "market")?;
        let mixture = if raw.scenario.is_empty() {
            ScenarioMixture::single(market.clone())
        } else {
            let mut entries = Vec::with_capacity(raw.scenario.len());
            for (i, sc) in raw.scenario.iter().enumerate() {
                let name = format!("scenario[{i}]");
                if !(sc.probability >= 0.0 && sc.probability <= 1.0) {
                    return Err(CliError::config(format!(
                        "{name}.probability: must lie in [0, 1], got {}",
                        sc.probability
                    )));
                }
                entries.push((build_market(mk, Some(sc), &name)?, sc.probability));
            }
            ScenarioMixture::new(entries).map_err(|e| CliError::config(format!("scenario: {e}")))?
        };

        let utility = raw
            .utility
            .map(|u| UtilitySpec::new(u.family()))
            .transpose()
            .map_err(|e| CliError::config(format!("utility: {e}")))?;
        if let Some(spec) = utility {
            spec.check_initial_wealth(mk.x0)
                .map_err(|e| CliError::config(format!("market.x0: {e}")))?;
        }

        let m = raw.compress.m.unwrap_or(mk.n);
        if m == 0 || m > mk.n {
            return Err(CliError::config(format!("compress.m: must lie in 1..={}, got {m}", mk.n)));
        }

        let measure = match raw.sim.measure {
            MeasureName::Martingale => Measure::Martingale,
            MeasureName::Physical => Measure::Physical,
        };
        if let Some(eps) = raw.sim.epsilon {
            if !(eps >= 0.0 && eps < mk.horizon) {
                return Err(CliError::config(format!(
                    "sim.epsilon: must lie in [0, {}), got {eps}",
                    mk.horizon
                )));
            }
        }
        let sim = SimConfig::new(raw.sim.paths, raw.sim.steps, raw.sim.seed)
            .with_measure(measure)
            .with_cutoff(raw.sim.epsilon.unwrap_or(0.0));
        sim.validate(mk.horizon).map_err(|e| CliError::config(format!("sim: {e}")))?;

        let quad = QuadConfig {
            nodes: raw.pde.nodes,
            truncation_sigmas: raw.pde.truncation_sigmas,
        };
        NormalQuadrature::new(quad).map_err(|e| CliError::config(format!("pde: {e}")))?;

        let subset = parse_subset(raw.verify.subset.as_deref(), mk.n, "verify.subset")?;
        let better = parse_subset(raw.verify.better.as_deref(), mk.n, "verify.better")?;
        if subset.is_some() != better.is_some() {
            return Err(CliError::config("verify: subset and better must be given together"));
        }
        if !(raw.verify.replication_tolerance > 0.0) {
            return Err(CliError::config("verify.replication_tolerance: must be positive"));
        }
        if raw.output.formats.is_empty() {
            return Err(CliError::config("output.formats: at least one format required"));
        }

        let mut hashed = raw.clone();
        hashed.output.dir = None;
        let hash = hex::encode(Sha256::digest(serde_json::to_vec(&hashed)?));

        Ok(Self {
            market,
            mixture,
            utility,
            m,
            cap: raw.compress.cap,
            sim,
            epsilon: raw.sim.epsilon,
            quad,
            out_dir: raw.output.dir.clone().unwrap_or_else(|| PathBuf::from("out")),
            csv: raw.output.formats.contains(&Format::Csv),
            json: raw.output.formats.contains(&Format::Json),
            subset,
            better,
            replication_tolerance: raw.verify.replication_tolerance,
            hash,
            raw,
        })
    }
}

fn parse_subset(indices: Option<&[usize]>, n: usize, field: &str) -> Result<Option<Subset>, CliError> {
    let Some(indices) = indices else {
        return Ok(None);
    };
    let mut zero_based = Vec::with_capacity(indices.len());
    for (i, &ix) in indices.iter().enumerate() {
        if ix == 0 || ix > n {
            return Err(CliError::config(format!("{field}[{i}]: stock index must lie in 1..={n}, got {ix}")));
        }
        zero_based.push(ix - 1);
    }
    Subset::new(zero_based, n)
        .map(Some)
        .map_err(|e| CliError::config(format!("{field}: {e}")))
}

fn check_finite(field: &str, values: &[f64]) -> Result<(), CliError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(CliError::config(format!("{field}: entry {i} is not finite"))),
        None => Ok(()),
    }
}

/// The market section with `scenario`'s overrides applied.
fn build_market(mk: &MarketSection, scenario: Option<&ScenarioSection>, name: &str) -> Result<MarketParams, CliError> {
    let n = mk.n;
    if n == 0 {
        return Err(CliError::config("market.n: must be at least 1"));
    }
    if !(mk.horizon > 0.0 && mk.horizon.is_finite()) {
        return Err(CliError::config(format!("market.horizon: must be positive, got {}", mk.horizon)));
    }
    let grid = mk.grid.clone().unwrap_or_else(|| vec![0.0, mk.horizon]);
    if grid.len() < 2 || grid[0] != 0.0 || *grid.last().unwrap() != mk.horizon {
        return Err(CliError::config(format!(
            "market.grid: must run from 0 to horizon = {} with at least two points",
            mk.horizon
        )));
    }
    let intervals = grid.len() - 1;
    let pick = |field: &str| {
        scenario
            .map(|_| format!("{name}.{field}"))
            .unwrap_or_else(|| format!("market.{field}"))
    };

    let (rate_field, rate) = match scenario.and_then(|s| s.rate.as_ref()) {
        Some(r) => (pick("rate"), r),
        None => ("market.rate".to_string(), &mk.rate),
    };
    let rates: Vec<f64> = rate.expand(&rate_field, intervals)?.into_iter().map(|(_, r)| r).collect();
    check_finite(&rate_field, &rates)?;

    let (drift_field, drift) = match scenario.and_then(|s| s.drift.as_ref()) {
        Some(d) => (pick("drift"), d),
        None => ("market.drift".to_string(), &mk.drift),
    };
    let mut drifts = Vec::with_capacity(intervals);
    for (field, d) in drift.expand(&drift_field, intervals)? {
        if d.len() != n {
            return Err(CliError::config(format!("{field}: expected n = {n} entries, got {}", d.len())));
        }
        check_finite(&field, &d)?;
        drifts.push(DVector::from_vec(d));
    }

    let (vol_field, vol) = match scenario.and_then(|s| s.vol.as_ref()) {
        Some(v) => (pick("vol"), v),
        None => ("market.vol".to_string(), &mk.vol),
    };
    let mut vols = Vec::with_capacity(intervals);
    for (field, v) in vol.expand(&vol_field, intervals)? {
        if v.len() != n * n {
            return Err(CliError::config(format!(
                "{field}: expected n*n = {} entries (row-major), got {}",
                n * n,
                v.len()
            )));
        }
        check_finite(&field, &v)?;
        vols.push(DMatrix::from_row_slice(n, n, &v));
    }

    let s0 = mk.s0.clone().unwrap_or_else(|| vec![1.0; n]);
    if s0.len() != n {
        return Err(CliError::config(format!("market.s0: expected n = {n} entries, got {}", s0.len())));
    }
    if !(mk.x0.is_finite()) {
        return Err(CliError::config("market.x0: must be finite"));
    }
    if !(mk.c1 > 0.0) {
        return Err(CliError::config(format!("market.c1: must be positive, got {}", mk.c1)));
    }
    let params = MarketParams::new(grid, rates, drifts, vols, DVector::from_vec(s0), mk.x0)
        .map_err(|e| CliError::config(format!("{name}: {e}")))?;
    validate_market(&params, mk.c1).map_err(|e| CliError::config(format!("{name}: {e}")))?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[market]
n = 1
horizon = 1.0
drift = [0.05]
vol = [0.2]
"#;

    fn err(text: &str) -> String {
        RunConfig::parse(text, None).unwrap_err().to_string()
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::parse(MINIMAL, None).unwrap();
        assert_eq!(c.market.grid(), &[0.0, 1.0]);
        assert_eq!(c.m, 1);
        assert_eq!(c.sim.paths, 10_000);
        assert_eq!(c.quad, QuadConfig::default());
        assert!(c.utility.is_none() && c.csv && c.json);
        assert_eq!(c.mixture.len(), 1);
    }

    #[test]
    fn seed_override_changes_hash_but_out_dir_does_not() {
        let a = RunConfig::parse(MINIMAL, None).unwrap();
        let b = RunConfig::parse(MINIMAL, Some(5)).unwrap();
        assert_eq!(b.sim.seed, 5);
        assert_ne!(a.hash, b.hash);
        let c = RunConfig::parse(&format!("{MINIMAL}\n[output]\ndir = \"elsewhere\"\n"), None).unwrap();
        assert_eq!(a.hash, c.hash);
        assert_eq!(a.hash.len(), 64);
    }

    #[test]
    fn diagnostics_name_the_field() {
        let bad_vol = MINIMAL.replace("vol = [0.2]", "vol = [0.2, 0.1]");
        assert!(err(&bad_vol).contains("market.vol"), "{}", err(&bad_vol));
        let two = "[market]\nn = 2\nhorizon = 1.0\ngrid = [0.0, 0.5, 1.0]\ndrift = [0.05, 0.06]\nvol = [[0.2, 0, 0, 0.3], [0.2, 0]]\n";
        assert!(err(two).contains("market.vol[1]"), "{}", err(two));
        let rates = MINIMAL.replace("drift", "rate = [0.0, 0.1]\ndrift");
        assert!(err(&rates).contains("market.rate"));
        assert!(err(&MINIMAL.replace("horizon = 1.0", "horizon = 1.0\nbogus = 3")).contains("bogus"));
        assert!(err(&format!("{MINIMAL}[utility]\nfamily = \"power\"\n")).contains("delta"));
        assert!(err(&format!("{MINIMAL}[compress]\nm = 2\n")).contains("compress.m"));
        assert!(err(&format!("{MINIMAL}[verify]\nsubset = [2]\nbetter = [1]\n")).contains("verify.subset[0]"));
        let singular = MINIMAL.replace("vol = [0.2]", "vol = [0.0]");
        assert!(err(&singular).contains("market"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = err("[market]\nn = 1\nhorizon = \"one\"\n");
        assert!(e.contains("line 3"), "{e}");
    }

    #[test]
    fn scenarios_override_coefficients() {
        let text = format!(
            "{MINIMAL}\n[[scenario]]\nprobability = 0.5\n\n[[scenario]]\nprobability = 0.5\nvol = [0.4]\n"
        );
        let c = RunConfig::parse(&text, None).unwrap();
        assert_eq!(c.mixture.len(), 2);
        assert_eq!(c.mixture.scenarios()[1].vols()[0][(0, 0)], 0.4);
        let bad = format!("{MINIMAL}\n[[scenario]]\nprobability = 1.0\nvol = [0.4, 0.1]\n");
        assert!(err(&bad).contains("scenario[0].vol"));
    }

    #[test]
    fn utility_families_parse() {
        for (s, f) in [
            ("family = \"log\"", UtilityFamily::Log),
            ("family = \"power\"\ndelta = 0.5", UtilityFamily::Power { delta: 0.5 }),
            ("family = \"mean_variance\"\nk = 0.5\nc = 3.0", UtilityFamily::MeanVariance { k: 0.5, c: 3.0 }),
            ("family = \"polynomial_goal\"\nl = 2", UtilityFamily::PolynomialGoal { l: 2 }),
            ("family = \"goal\"\nalpha = 2.0", UtilityFamily::GoalAchieving { alpha: 2.0 }),
        ] {
            let c = RunConfig::parse(&format!("{MINIMAL}[utility]\n{s}\n"), None).unwrap();
            assert_eq!(c.utility.unwrap().family(), f);
        }
    }
}
