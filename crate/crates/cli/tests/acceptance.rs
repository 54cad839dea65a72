//! Acceptance suite: twelve end-to-end criteria on the reference market
//! (n = 2, T = 1, r = 0, a = (0.05, 0.06), sigma = diag(0.2, 0.3), x0 = 1,
//! R = 0.1025). Prints one PASS/FAIL line per criterion and exits nonzero if
//! any fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use optfolio::compress::{compressed_drift, enumerate_subsets, projector, restricted_inverse, Subset, DEFAULT_SUBSET_CAP};
use optfolio::quadrature::FnPayoff;
use optfolio::replicate::{closed_form_H, solve_heat};
use optfolio::simulate::{moment_oracle, wealth_path};
use optfolio::stats::{chunked_moments, normal_cdf};
use optfolio::utility::{budget, certify_growth};
use optfolio::verify::{
    check_dominance_gap, check_expected_utility, check_iplus_equality, check_martingale, check_trivial,
    realized_utility, CheckReport,
};
use optfolio::{
    calibrate_lambda, compute_metrics, evolve_wealth, optimal_strategy, select_subset, simulate_ensemble, DMatrix,
    DVector, Exposure, MarketParams, Measure, NormalQuadrature, QuadConfig, ScenarioMixture, SimConfig, StrategyKind,
    SubsetPolicy, UtilityFamily, UtilitySpec,
};
use optfolio_cli::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const R: f64 = 0.1025;
const SEED: u64 = 0x5eed_2024;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn reference() -> MarketParams {
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

fn quad() -> NormalQuadrature {
    NormalQuadrature::new(QuadConfig::default()).unwrap()
}

fn single(params: &MarketParams, i: usize) -> SubsetPolicy {
    SubsetPolicy::constant(params, Subset::new(vec![i], params.n()).unwrap()).unwrap()
}

fn describe(r: &CheckReport) -> String {
    match r.std_error {
        Some(se) => format!("{} = {:.6} vs {:.6} (se {:.2e}, tol {:.2e})", r.name, r.estimate, r.target, se, r.tolerance),
        None => format!("{} = {:.3e} vs {:.3e} (tol {:.1e})", r.name, r.estimate, r.target, r.tolerance),
    }
}

fn all_pass(reports: &[CheckReport]) -> Outcome {
    let text = reports.iter().map(describe).collect::<Vec<_>>().join("; ");
    if reports.iter().all(|r| r.passed) {
        Ok(text)
    } else {
        Err(text)
    }
}

fn ensure(ok: bool, text: String) -> Outcome {
    if ok {
        Ok(text)
    } else {
        Err(text)
    }
}

fn martingale_identities() -> Outcome {
    let e = simulate_ensemble(reference(), SimConfig::new(200_000, 1, SEED)).map_err(|e| e.to_string())?;
    all_pass(&check_martingale(&e, None))
}

fn moment_oracle_check() -> Outcome {
    let e = simulate_ensemble(reference(), SimConfig::new(200_000, 1, SEED + 1)).map_err(|e| e.to_string())?;
    let z = e.terminal_density();
    let reports: Vec<CheckReport> = [-2.0, -1.0, 0.5, 2.0]
        .into_iter()
        .map(|q| {
            let est = chunked_moments(z.len(), |i| Some(z[i].powf(q))).estimate();
            CheckReport::stochastic(format!("E Z^{q}"), moment_oracle(q, R), est)
        })
        .collect();
    all_pass(&reports)
}

fn pde_vs_closed_form() -> Outcome {
    let rbar = R;
    let grid: Vec<f64> = (0..=40).map(|i| 0.1 * 100f64.powf(i as f64 / 40.0)).collect();
    let times = [0.0, 0.5, 0.9];
    let mut worst_power = 0.0f64;
    for nu in [-1.0, 0.5, 2.0, 3.0] {
        let (c1, c0, lambda) = (1.0, 0.0, 0.8);
        let f = move |x: f64| c1 * (x / lambda).powf(nu) + c0;
        let growth = certify_growth(f, R, None).map_err(|e| e.to_string())?;
        let h = solve_heat(Arc::new(FnPayoff(f)), growth, rbar, 1.0, QuadConfig::default()).map_err(|e| e.to_string())?;
        let exact = closed_form_H(nu, c0, c1, lambda, rbar, 1.0).map_err(|e| e.to_string())?;
        for &t in &times {
            for &x in &grid {
                let e = exact.value(x, t).unwrap();
                worst_power = worst_power.max((h.value(x, t).unwrap() - e).abs() / e.abs());
            }
        }
    }
    let spec = UtilitySpec::new(UtilityFamily::GoalAchieving { alpha: 2.0 }).unwrap();
    let claim = calibrate_lambda(spec, 1.0, R, &quad()).map_err(|e| e.to_string())?;
    let kink = claim.lambda() * 2.0;
    let h = solve_heat(
        Arc::new(claim),
        optfolio::utility::check_growth_bound(&claim, R).map_err(|e| e.to_string())?,
        rbar,
        1.0,
        QuadConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let mut worst_goal = 0.0f64;
    for &t in &times {
        let s = rbar * (1.0 - t);
        for &x in &grid {
            if (x / kink).ln().abs() < 1e-3 {
                continue;
            }
            let oracle = 2.0 * normal_cdf(((x / kink).ln() - 0.5 * s) / s.sqrt());
            worst_goal = worst_goal.max((h.value(x, t).unwrap() - oracle).abs());
        }
    }
    ensure(
        worst_power <= 1e-6 && worst_goal <= 1e-6,
        format!("power sup rel err {worst_power:.2e}, goal sup abs err {worst_goal:.2e} (tol 1e-6)"),
    )
}

fn budget_constraints() -> Outcome {
    let q = quad();
    let families = [
        UtilityFamily::Log,
        UtilityFamily::Power { delta: 0.5 },
        UtilityFamily::MeanVariance { k: 0.5, c: 3.0 },
        UtilityFamily::PolynomialGoal { l: 2 },
        UtilityFamily::GoalAchieving { alpha: 2.0 },
    ];
    let mut worst = 0.0f64;
    for f in families {
        let spec = UtilitySpec::new(f).unwrap();
        let claim = calibrate_lambda(spec, 1.0, R, &q).map_err(|e| format!("{f:?}: {e}"))?;
        worst = worst.max((budget(&claim, R, &q) - 1.0).abs());
    }
    ensure(worst <= 1e-8, format!("max |E_* F - x0| = {worst:.2e} over 5 families (tol 1e-8)"))
}

fn log_end_to_end() -> Outcome {
    let m = reference();
    let spec = UtilitySpec::new(UtilityFamily::Log).unwrap();
    let opt = optimal_strategy(spec, vec![Exposure::full(&m).unwrap()], 1.0, QuadConfig::default(), None)
        .map_err(|e| e.to_string())?;
    let cfg = SimConfig::new(100_000, 10, SEED + 5).with_measure(Measure::Physical);
    let e = simulate_ensemble(m.clone(), cfg).map_err(|e| e.to_string())?;
    let w = evolve_wealth(&opt.strategy, &e, 1.0).map_err(|e| e.to_string())?;
    let z = e.terminal_density();
    let gap = w.terminal.iter().zip(&z).fold(0.0f64, |g, (x, z)| g.max((x - z).abs() / z.max(1.0)));
    let utility = check_expected_utility(&opt, &ScenarioMixture::single(m), cfg, 1.0, QuadConfig::default())
        .map_err(|e| e.to_string())?;
    let text = format!("max |X~(T) - Z(T)| = {gap:.1e} (tol 1e-12); {}", describe(&utility));
    ensure(gap <= 1e-12 && utility.passed && (utility.target - 0.05125).abs() < 1e-15, text)
}

fn goal_end_to_end() -> Outcome {
    let m = reference();
    let alpha = 2.0;
    let spec = UtilitySpec::new(UtilityFamily::GoalAchieving { alpha }).unwrap();
    let eps = 1e-3;
    let opt = optimal_strategy(spec, vec![Exposure::full(&m).unwrap()], 1.0, QuadConfig::default(), Some(eps))
        .map_err(|e| e.to_string())?;
    let lambda = opt.claims[0].lambda();
    let target = normal_cdf(0.5 * R.sqrt() - (lambda * alpha).ln() / R.sqrt());
    let cfg = SimConfig::new(100_000, 1000, SEED + 6)
        .with_measure(Measure::Physical)
        .with_cutoff(eps);
    let e = simulate_ensemble(m, cfg).map_err(|e| e.to_string())?;
    let w = evolve_wealth(&opt.strategy, &e, 1.0).map_err(|e| e.to_string())?;
    let est = chunked_moments(w.terminal.len(), |i| realized_utility(spec, w.terminal[i])).estimate();
    let tol = (3.0 * est.std_error).max(0.01);
    ensure(
        (est.mean - target).abs() <= tol,
        format!(
            "P(X~ >= alpha/2) = {:.5} vs {target:.5} (se {:.1e}, tol {tol:.3}), lambda = {lambda:.6}",
            est.mean, est.std_error
        ),
    )
}

/// Random SPD covariance `L L^T` with `L` lower triangular.
fn random_market(rng: &mut ChaCha8Rng, n: usize) -> MarketParams {
    let l = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            rng.random_range(0.1..0.4)
        } else if j < i {
            rng.random_range(-0.15..0.15)
        } else {
            0.0
        }
    });
    let a = DVector::from_fn(n, |_, _| rng.random_range(-0.05..0.15));
    MarketParams::constant(1.0, 0.01, a, l, DVector::from_element(n, 1.0), 1.0).unwrap()
}

/// Best subset of size at most `m` by bitmask scan with explicit inverses of
/// the principal submatrices; ties go to the smaller sorted index list.
fn independent_argmax(v: &DMatrix<f64>, e: &DVector<f64>, m: usize) -> (Vec<usize>, f64) {
    let n = e.len();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        if idx.len() > m {
            continue;
        }
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |r, c| v[(idx[r], idx[c])]);
        let es = DVector::from_iterator(idx.len(), idx.iter().map(|&i| e[i]));
        let val = es.dot(&(sub.try_inverse().unwrap() * &es));
        let better = match &best {
            None => true,
            Some((b, bv)) => val > *bv || (val == *bv && idx < *b),
        };
        if better {
            best = Some((idx, val));
        }
    }
    best.unwrap()
}

fn compression_selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 7);
    let (n, m) = (6, 3);
    let (mut mismatches, mut worst_inv, mut drift_inexact, mut non_monotone, mut pairs) = (0, 0.0f64, 0, 0, 0);
    for _ in 0..20 {
        let params = random_market(&mut rng, n);
        let v = &params.vols()[0] * params.vols()[0].transpose();
        let e = params.excess_drift(0);
        let policy = select_subset(&params, m, DEFAULT_SUBSET_CAP).map_err(|e| e.to_string())?;
        let (idx, val) = independent_argmax(&v, &e, m);
        let sel = policy.interval(0);
        if sel.subset.indices() != idx.as_slice() && (sel.value - val).abs() > 1e-14 * val.max(1.0) {
            mismatches += 1;
        }
        let all = enumerate_subsets(n, n);
        let value = |s: &Subset| {
            let q = restricted_inverse(&v, s).unwrap();
            e.dot(&(q * &e))
        };
        for s in &all {
            let p = projector(s, n);
            let q = restricted_inverse(&v, s).map_err(|e| e.to_string())?;
            let x = &p * DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            worst_inv = worst_inv.max((&p * &v * &p * &q * &x - &x).norm() / x.norm().max(1.0));
            let a = &params.drifts()[0];
            let a_i = compressed_drift(a, params.rates()[0], &v, s).map_err(|e| e.to_string())?;
            if &p * &a_i != &p * a {
                drift_inexact += 1;
            }
            for j in 0..n {
                if !s.contains(j) {
                    let mut bigger = s.indices().to_vec();
                    bigger.push(j);
                    let t = Subset::new(bigger, n).unwrap();
                    pairs += 1;
                    if value(&t) < value(s) * (1.0 - 1e-12) - 1e-15 {
                        non_monotone += 1;
                    }
                }
            }
        }
    }
    ensure(
        mismatches == 0 && worst_inv <= 1e-10 && drift_inexact == 0 && non_monotone == 0,
        format!(
            "20 markets: {mismatches} selector mismatches, max |PVPQx - x| = {worst_inv:.1e}, \
             {drift_inexact} inexact P a_I, {non_monotone}/{pairs} non-monotone pairs"
        ),
    )
}

fn dominance_gap() -> Outcome {
    let m = reference();
    let spec = UtilitySpec::new(UtilityFamily::Log).unwrap();
    let r = check_dominance_gap(
        spec,
        &m,
        &single(&m, 1),
        &single(&m, 0),
        SimConfig::new(100_000, 10, SEED + 8),
        QuadConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    ensure(r.passed && (r.target - 0.01125).abs() < 1e-15, describe(&r))
}

fn iplus_equality() -> Outcome {
    let m = reference();
    let mut reports = Vec::new();
    for (k, f) in [UtilityFamily::Log, UtilityFamily::Power { delta: 0.5 }].into_iter().enumerate() {
        let spec = UtilitySpec::new(f).unwrap();
        let mut r = check_iplus_equality(
            spec,
            &m,
            &single(&m, 1),
            &single(&m, 0),
            SimConfig::new(100_000, 10, SEED + 9 + k as u64),
            QuadConfig::default(),
        )
        .map_err(|e| e.to_string())?;
        for x in &mut r {
            x.name = format!("{}[{}]", x.name, if k == 0 { "log" } else { "power" });
        }
        reports.extend(r);
    }
    all_pass(&reports)
}

fn degenerate_market() -> Outcome {
    let params = reference().with_drifts(vec![DVector::zeros(2)]).unwrap();
    let policy = select_subset(&params, 1, DEFAULT_SUBSET_CAP).map_err(|e| e.to_string())?;
    let spec = UtilitySpec::new(UtilityFamily::Log).unwrap();
    let opt = optimal_strategy(spec, vec![Exposure::full(&params).unwrap()], 1.0, QuadConfig::default(), None)
        .map_err(|e| e.to_string())?;
    let e = simulate_ensemble(params, SimConfig::new(2000, 20, SEED + 10)).map_err(|e| e.to_string())?;
    let mut reports = check_trivial(&opt.strategy, &e, 1.0).map_err(|e| e.to_string())?;
    reports.push(CheckReport::deterministic("selector value", 0.0, policy.interval(0).value, 0.0));

    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/degenerate.toml"))
        .map_err(|e| e.to_string())?;
    let cfg = RunConfig::parse(&text, None).map_err(|e| e.to_string())?;
    let suite = optfolio_cli::commands::verify_reports(&cfg).map_err(|e| e.to_string())?;
    let failed = suite.iter().filter(|r| !r.passed).count();
    let ok = reports.iter().all(|r| r.passed) && failed == 0 && opt.strategy.kind() == StrategyKind::Trivial;
    ensure(
        ok,
        format!("{}; full suite {}/{} checks pass", all_pass(&reports).unwrap_or_else(|e| e), suite.len() - failed, suite.len()),
    )
}

fn scenario_mixture() -> Outcome {
    let base = MarketParams::new(
        vec![0.0, 0.5, 1.0],
        vec![0.0, 0.0],
        vec![DVector::from_vec(vec![0.04]); 2],
        vec![DMatrix::from_element(1, 1, 0.2); 2],
        DVector::from_element(1, 1.0),
        1.0,
    )
    .unwrap();
    let high = MarketParams::new(
        vec![0.0, 0.5, 1.0],
        vec![0.0, 0.0],
        vec![DVector::from_vec(vec![0.04]); 2],
        vec![DMatrix::from_element(1, 1, 0.2), DMatrix::from_element(1, 1, 0.04 / 0.28f64.sqrt())],
        DVector::from_element(1, 1.0),
        1.0,
    )
    .unwrap();
    let risks = [compute_metrics(&base).unwrap().total_risk(), compute_metrics(&high).unwrap().total_risk()];
    let mix = ScenarioMixture::new(vec![(base.clone(), 0.5), (high.clone(), 0.5)]).map_err(|e| e.to_string())?;
    let spec = UtilitySpec::new(UtilityFamily::Log).unwrap();
    let exposures = vec![Exposure::full(&base).unwrap(), Exposure::full(&high).unwrap()];
    let opt = optimal_strategy(spec, exposures, 1.0, QuadConfig::default(), None).map_err(|e| e.to_string())?;
    let cfg = SimConfig::new(100_000, 20, SEED + 11).with_measure(Measure::Physical);
    let u = check_expected_utility(&opt, &mix, cfg, 1.0, QuadConfig::default()).map_err(|e| e.to_string())?;

    // wealth against exp(theta w_*(t) - int |theta|^2 / 2), accumulated here
    let e = simulate_ensemble(mix, cfg).map_err(|e| e.to_string())?;
    let times = e.times().to_vec();
    let mut worst = 0.0f64;
    for i in 0..200 {
        let path = e.path(i);
        let wealth = wealth_path(&opt.strategy, &e, i, 1.0).map_err(|e| e.to_string())?;
        let params = &e.mixture().scenarios()[path.scenario];
        let (mut drive, mut clock) = (0.0, 0.0);
        for j in 0..times.len() - 1 {
            let dt = times[j + 1] - times[j];
            let k = params.interval_at(times[j]);
            let theta = params.excess_drift(k)[0] / params.vols()[k][(0, 0)];
            drive += theta * (path.increment(j, 1)[0] + theta * dt);
            clock += theta * theta * dt;
            let exact = (drive - 0.5 * clock).exp();
            worst = worst.max((wealth.wealth[j + 1] - exact).abs() / exact.max(1.0));
        }
    }
    let text = format!(
        "R = ({:.4}, {:.4}); {}; max wealth path gap {worst:.1e} (tol 1e-12)",
        risks[0],
        risks[1],
        describe(&u)
    );
    ensure(u.passed && (u.target - 0.05).abs() < 1e-15 && worst <= 1e-12, text)
}

fn determinism() -> Outcome {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/running_example.toml");
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let mut listing = Vec::new();
    for threads in ["1", "8"] {
        let out = dir.path().join(threads);
        let status = Command::new(env!("CARGO_BIN_EXE_optfolio"))
            .args(["verify", "--threads", threads, "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .status()
            .map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("verify --threads {threads} exited with {status}"));
        }
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&out)
            .map_err(|e| e.to_string())?
            .map(|f| {
                let f = f.unwrap();
                (f.file_name().to_string_lossy().into_owned(), fs::read(f.path()).unwrap())
            })
            .collect();
        files.sort();
        listing.push(files);
    }
    let names: Vec<&str> = listing[0].iter().map(|(n, _)| n.as_str()).collect();
    ensure(
        listing[0] == listing[1],
        format!("--threads 1 vs 8: {} files compared ({})", names.len(), names.join(", ")),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("martingale identities", martingale_identities),
        ("moment oracle", moment_oracle_check),
        ("PDE vs closed form", pde_vs_closed_form),
        ("budget constraints", budget_constraints),
        ("log utility end to end", log_end_to_end),
        ("goal achieving end to end", goal_end_to_end),
        ("compression selection", compression_selection),
        ("dominance gap", dominance_gap),
        ("augmented market equality", iplus_equality),
        ("degenerate market", degenerate_market),
        ("scenario mixture", scenario_mixture),
        ("determinism across threads", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(outcome.is_err());
        println!("acceptance {:>2} {tag} [{secs:6.1}s] {name}: {detail}", i + 1);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
