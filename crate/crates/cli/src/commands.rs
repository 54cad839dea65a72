use std::sync::Arc;

use optfolio::compress::{dominates, enumerate_subsets, subset_count, Subset};
use optfolio::replicate::{closed_form_H, solve_heat, FeedbackRule};
use optfolio::simulate::{derive_seed, moment_oracle, wealth_path};
use optfolio::stats::{chunked_fold, chunked_moments, Moments};
use optfolio::utility::{budget, check_growth_bound, BUDGET_TOLERANCE};
use optfolio::verify::{
    check_dominance_gap, check_expected_utility, check_iplus_equality, check_martingale, check_replication,
    check_trivial,
};
use optfolio::{
    evolve_wealth, optimal_strategy, select_subset, simulate_ensemble, CheckReport, Exposure, MarketParams,
    NormalQuadrature, OptimalStrategy, Strategy, SubsetPolicy, UtilitySpec,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{check_table, float, Table, Writer};

/// Paths written to the strategy-sample file.
pub const SAMPLE_PATHS: usize = 5;

const MOMENT_ORDERS: [f64; 4] = [-2.0, -1.0, 0.5, 2.0];

/// Optimal strategy for the configured utility, one leg per scenario; each
/// leg trades the selected `m`-stock compressed market when `m < n`.
pub fn build_optimal(cfg: &RunConfig, spec: UtilitySpec) -> Result<OptimalStrategy, CliError> {
    let mut exposures = Vec::with_capacity(cfg.mixture.len());
    for params in cfg.mixture.scenarios() {
        let exposure = if cfg.m < params.n() {
            Exposure::compressed(params, &select_subset(params, cfg.m, cfg.cap)?)?
        } else {
            Exposure::full(params)?
        };
        exposures.push(exposure);
    }
    Ok(optimal_strategy(spec, exposures, cfg.market.x0(), cfg.quad, cfg.epsilon)?)
}

/// Suffix distinguishing per-scenario checks of a mixture.
fn scenario_name(cfg: &RunConfig, base: &str, s: usize) -> String {
    if cfg.mixture.len() == 1 {
        base.to_string()
    } else {
        format!("{base}[{s}]")
    }
}

fn renamed(mut r: CheckReport, name: String) -> CheckReport {
    r.name = name;
    r
}

/// Budget identity, replication and, for power-form claims, the
/// quadrature/closed-form cross-check, per scenario.
fn replication_checks(cfg: &RunConfig, optimal: &OptimalStrategy) -> Result<Vec<CheckReport>, CliError> {
    let nq = NormalQuadrature::new(cfg.quad).map_err(|e| CliError::config(format!("pde: {e}")))?;
    let x0 = cfg.market.x0();
    let mut out = Vec::new();
    for (s, (leg, claim)) in optimal.strategy.legs().iter().zip(&optimal.claims).enumerate() {
        let m = leg.metrics();
        let (risk, rbar, horizon) = (m.total_risk(), m.mean_risk(), m.horizon());
        out.push(CheckReport::deterministic(
            scenario_name(cfg, "calibration.budget", s),
            x0,
            budget(claim, risk, &nq),
            BUDGET_TOLERANCE * x0.abs().max(1.0),
        ));

        let single = Strategy::new(vec![leg.clone()], optimal.strategy.cutoff())?.with_domain(optimal.strategy.domain());
        let params = &cfg.mixture.scenarios()[s];
        let ensemble = simulate_ensemble(params.clone(), cfg.sim)?;
        let heat = match leg.rule() {
            FeedbackRule::Trivial => {
                for r in check_trivial(&single, &ensemble, x0)? {
                    let name = scenario_name(cfg, &r.name, s);
                    out.push(renamed(r, name));
                }
                continue;
            }
            FeedbackRule::Pde(h) => h.clone(),
            FeedbackRule::Power { .. } => {
                let p = claim.power_form().expect("wealth feedback comes from a power-form claim");
                closed_form_H(p.nu, p.c0, p.c1, p.lambda, rbar, horizon)?
            }
        };
        let r = check_replication(&single, &heat, &ensemble, x0, cfg.replication_tolerance)?;
        let name = scenario_name(cfg, &r.name, s);
        out.push(renamed(r, name));

        if let Some(p) = claim.power_form() {
            if let Ok(growth) = check_growth_bound(claim, risk) {
                let quad = solve_heat(Arc::new(*claim), growth, rbar, horizon, cfg.quad)?;
                let exact = closed_form_H(p.nu, p.c0, p.c1, p.lambda, rbar, horizon)?;
                let mut worst = 0.0f64;
                for t in [0.0, 0.5 * horizon, 0.9 * horizon] {
                    for i in 0..=40 {
                        let x = 0.1 * 100f64.powf(i as f64 / 40.0);
                        let e = exact.value(x, t)?;
                        worst = worst.max((quad.value(x, t)? - e).abs() / e.abs().max(1.0));
                    }
                }
                out.push(CheckReport::deterministic(
                    scenario_name(cfg, "replication.heat_crosscheck", s),
                    0.0,
                    worst,
                    1e-6,
                ));
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct CheckSummary<'a> {
    config_hash: &'a str,
    passed: bool,
    failed: usize,
    checks: &'a [CheckReport],
}

fn fail_on(reports: &[CheckReport]) -> Result<(), CliError> {
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            reports.len(),
            failed.join(", ")
        )))
    }
}

fn write_checks(w: &mut Writer, cfg: &RunConfig, csv: &str, json: &str, reports: &[CheckReport]) -> Result<(), CliError> {
    w.csv(csv, &check_table(reports))?;
    w.json(
        json,
        &CheckSummary {
            config_hash: &cfg.hash,
            passed: reports.iter().all(|r| r.passed),
            failed: reports.iter().filter(|r| !r.passed).count(),
            checks: reports,
        },
    )
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    config_hash: &'a str,
    paths: usize,
    terminal_density_mean: f64,
    terminal_density_std_error: f64,
    terminal_wealth_mean: Option<f64>,
    terminal_wealth_std_error: Option<f64>,
    domain_exits: usize,
}

/// Per-time summary of `Z`, the discounted prices and, with a utility, the
/// optimal strategy's normalized wealth.
pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let ensemble = simulate_ensemble(cfg.mixture.clone(), cfg.sim)?;
    let optimal = cfg.utility.map(|spec| build_optimal(cfg, spec)).transpose()?;
    let strategy = optimal.as_ref().map(|o| &o.strategy);
    let x0 = cfg.market.x0();
    let n = ensemble.n();
    let times = ensemble.times().to_vec();
    // per time: Z, S~_1..S~_n, X~
    let cols = n + 1 + usize::from(strategy.is_some());

    let step = |acc: &mut (Vec<Moments>, usize), i: usize| {
        let path = ensemble.path(i);
        let prices = ensemble.discounted_prices(&path);
        let wealth = strategy.map(|s| wealth_path(s, &ensemble, i, x0));
        for (j, price) in prices.iter().enumerate() {
            let row = &mut acc.0[j * cols..(j + 1) * cols];
            row[0].push(path.z(j));
            for k in 0..n {
                row[1 + k].push(price[k]);
            }
            if let Some(Ok(w)) = &wealth {
                row[n + 1].push(w.wealth[j]);
            }
        }
        if let Some(Ok(w)) = &wealth {
            acc.1 += usize::from(w.exit.is_some());
        }
    };
    if let Some(s) = strategy {
        // surfaces a strategy/ensemble mismatch as an error rather than empty columns
        wealth_path(s, &ensemble, 0, x0)?;
    }
    let chunks = chunked_fold(ensemble.len(), || (vec![Moments::default(); times.len() * cols], 0usize), step);
    let mut total = vec![Moments::default(); times.len() * cols];
    let mut exits = 0;
    for (chunk, e) in &chunks {
        for (t, c) in total.iter_mut().zip(chunk) {
            t.merge(c);
        }
        exits += e;
    }

    let mut header = vec!["t".to_string(), "z_mean".into(), "z_var".into()];
    for k in 1..=n {
        header.push(format!("s{k}_mean"));
        header.push(format!("s{k}_var"));
    }
    if strategy.is_some() {
        header.push("x_mean".into());
        header.push("x_var".into());
    }
    let mut table = Table::new(header);
    for (j, &t) in times.iter().enumerate() {
        let mut row = vec![float(t)];
        for m in &total[j * cols..(j + 1) * cols] {
            row.push(float(m.mean()));
            row.push(float(m.variance()));
        }
        table.push(row);
    }

    let last = &total[(times.len() - 1) * cols..];
    let z = last[0].estimate();
    let x = strategy.map(|_| last[n + 1].estimate());
    let mut w = Writer::new(cfg, "simulate")?;
    w.csv("summary.csv", &table)?;
    w.json(
        "summary.json",
        &SimulateSummary {
            config_hash: &cfg.hash,
            paths: ensemble.len(),
            terminal_density_mean: z.mean,
            terminal_density_std_error: z.std_error,
            terminal_wealth_mean: x.map(|e| e.mean),
            terminal_wealth_std_error: x.map(|e| e.std_error),
            domain_exits: exits,
        },
    )?;
    w.finish()
}

#[derive(Serialize)]
struct ReplicateSummary<'a> {
    config_hash: &'a str,
    strategy: String,
    cutoff: f64,
    lambda: Vec<f64>,
    domain_exits: usize,
    passed: bool,
    checks: &'a [CheckReport],
}

/// Calibrates and runs the optimal strategy; writes the replication report
/// and sample trajectories.
pub fn replicate(cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.utility()?;
    let optimal = build_optimal(cfg, spec)?;
    let reports = replication_checks(cfg, &optimal)?;
    let x0 = cfg.market.x0();
    let ensemble = simulate_ensemble(cfg.mixture.clone(), cfg.sim)?;
    let exits = evolve_wealth(&optimal.strategy, &ensemble, x0)?.exits.len();

    let n = ensemble.n();
    let mut header = vec!["path".to_string(), "scenario".into(), "t".into(), "z".into()];
    header.extend((1..=n).map(|k| format!("pi_{k}")));
    header.push("x".into());
    let mut samples = Table::new(header);
    for i in 0..SAMPLE_PATHS.min(ensemble.len()) {
        let p = wealth_path(&optimal.strategy, &ensemble, i, x0)?;
        for (j, &t) in ensemble.times().iter().enumerate() {
            let pi = optimal.strategy.position(p.scenario, t, p.density[j], p.wealth[j]);
            let mut row = vec![i.to_string(), p.scenario.to_string(), float(t), float(p.density[j])];
            row.extend(pi.iter().map(|&v| float(v)));
            row.push(float(p.wealth[j]));
            samples.push(row);
        }
    }

    let mut w = Writer::new(cfg, "replicate")?;
    w.csv("replication.csv", &check_table(&reports))?;
    w.csv("strategy_samples.csv", &samples)?;
    w.json(
        "summary.json",
        &ReplicateSummary {
            config_hash: &cfg.hash,
            strategy: format!("{:?}", optimal.strategy.kind()),
            cutoff: optimal.strategy.cutoff(),
            lambda: optimal.claims.iter().map(|c| c.lambda()).collect(),
            domain_exits: exits,
            passed: reports.iter().all(|r| r.passed),
            checks: &reports,
        },
    )?;
    w.finish()?;
    fail_on(&reports)
}

#[derive(Serialize)]
struct Selection {
    scenario: usize,
    m: usize,
    /// 1-based subset per interval.
    subsets: Vec<Vec<usize>>,
    risk: f64,
}

/// Selection report for every `m' <= m`: all candidate subsets with their
/// per-interval values and risk, the selected flags, and whether the
/// selected policy dominates each candidate.
pub fn select(cfg: &RunConfig) -> Result<(), CliError> {
    let n = cfg.market.n();
    let count = subset_count(n, cfg.m);
    if count > cfg.cap as u128 {
        return Err(CliError::config(format!(
            "compress: {count} candidate subsets exceed compress.cap = {}",
            cfg.cap
        )));
    }
    let subsets = enumerate_subsets(n, cfg.m);
    let intervals = cfg.market.intervals();
    let mut header = vec!["scenario".to_string(), "m".into(), "subset".into(), "size".into()];
    header.extend((1..=intervals).map(|k| format!("value_{k}")));
    header.push("risk".into());
    header.extend((1..=intervals).map(|k| format!("selected_{k}")));
    header.push("selected".into());
    header.push("dominated".into());
    let mut table = Table::new(header);
    let mut chosen = Vec::new();

    for (s, params) in cfg.mixture.scenarios().iter().enumerate() {
        let candidates: Vec<SubsetPolicy> = subsets
            .iter()
            .map(|sub| SubsetPolicy::constant(params, sub.clone()))
            .collect::<Result<_, _>>()?;
        for mm in 1..=cfg.m {
            let policy = select_subset(params, mm, cfg.cap)?;
            for (sub, cand) in subsets.iter().zip(&candidates).filter(|(sub, _)| sub.len() <= mm) {
                let mut row = vec![s.to_string(), mm.to_string(), sub.to_string(), sub.len().to_string()];
                row.extend(cand.intervals().iter().map(|iv| float(iv.value)));
                row.push(float(cand.risk()));
                let flags: Vec<bool> = policy.intervals().iter().map(|iv| &iv.subset == sub).collect();
                row.extend(flags.iter().map(|f| f.to_string()));
                row.push(flags.iter().all(|&f| f).to_string());
                row.push(dominates(&policy, cand, &cfg.mixture)?.to_string());
                table.push(row);
            }
            chosen.push(Selection {
                scenario: s,
                m: mm,
                subsets: policy.subsets().iter().map(Subset::one_based).collect(),
                risk: policy.risk(),
            });
        }
    }

    let mut w = Writer::new(cfg, "select")?;
    w.csv("selection.csv", &table)?;
    w.json("selection.json", &chosen)?;
    w.finish()
}

/// The pair of constant subsets used by the dominance checks: the
/// configured pair, or the two candidates of size at most `m` with the
/// largest risk.
fn dominance_pair(cfg: &RunConfig, params: &MarketParams) -> Result<Option<(SubsetPolicy, SubsetPolicy)>, CliError> {
    if let (Some(lo), Some(hi)) = (&cfg.subset, &cfg.better) {
        return Ok(Some((
            SubsetPolicy::constant(params, lo.clone())?,
            SubsetPolicy::constant(params, hi.clone())?,
        )));
    }
    if params.n() < 2 || subset_count(params.n(), cfg.m) > cfg.cap as u128 {
        return Ok(None);
    }
    let mut ranked: Vec<SubsetPolicy> = enumerate_subsets(params.n(), cfg.m)
        .into_iter()
        .map(|s| SubsetPolicy::constant(params, s))
        .collect::<Result<_, _>>()?;
    // stable sort keeps lexicographic order among equal risks
    ranked.sort_by(|a, b| b.risk().total_cmp(&a.risk()));
    let better = ranked.remove(0);
    let subset = ranked.remove(0);
    Ok(Some((subset, better)))
}

/// Every check applicable to the configuration.
pub fn verify_reports(cfg: &RunConfig) -> Result<Vec<CheckReport>, CliError> {
    let spec = cfg.utility()?;
    let optimal = build_optimal(cfg, spec)?;
    let x0 = cfg.market.x0();
    let seed = cfg.sim.seed;
    let ensemble = simulate_ensemble(cfg.mixture.clone(), cfg.sim)?;
    let wealth = evolve_wealth(&optimal.strategy, &ensemble, x0)?;
    let mut reports = check_martingale(&ensemble, Some((&wealth, x0)));

    let z = ensemble.terminal_density();
    let risks: Vec<f64> = (0..ensemble.scenarios()).map(|s| ensemble.metrics(s).total_risk()).collect();
    for q in MOMENT_ORDERS {
        let target: f64 = cfg
            .mixture
            .probabilities()
            .iter()
            .zip(&risks)
            .map(|(p, &r)| p * moment_oracle(q, r))
            .sum();
        let est = chunked_moments(z.len(), |i| Some(z[i].powf(q))).estimate();
        reports.push(CheckReport::stochastic(format!("moments.q={q}"), target, est));
    }

    reports.extend(replication_checks(cfg, &optimal)?);
    reports.push(check_expected_utility(
        &optimal,
        &cfg.mixture,
        cfg.sim.with_seed(derive_seed(seed, 3)),
        x0,
        cfg.quad,
    )?);

    if cfg.mixture.len() == 1 {
        if let Some((subset, better)) = dominance_pair(cfg, &cfg.market)? {
            reports.push(check_dominance_gap(
                spec,
                &cfg.market,
                &subset,
                &better,
                cfg.sim.with_seed(derive_seed(seed, 4)),
                cfg.quad,
            )?);
            reports.extend(check_iplus_equality(
                spec,
                &cfg.market,
                &subset,
                &better,
                cfg.sim.with_seed(derive_seed(seed, 5)),
                cfg.quad,
            )?);
        }
    }
    Ok(reports)
}

/// Runs [`verify_reports`] and writes the suite; fails with exit code 3 when
/// any check fails.
pub fn verify(cfg: &RunConfig) -> Result<(), CliError> {
    let reports = verify_reports(cfg)?;
    let mut w = Writer::new(cfg, "verify")?;
    write_checks(&mut w, cfg, "checks.csv", "summary.json", &reports)?;
    w.finish()?;
    fail_on(&reports)
}
