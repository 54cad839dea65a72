use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_optfolio"))
}

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

fn column(path: &Path, name: &str) -> usize {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().position(|h| h == name).unwrap()
}

const RUNNING: &str = r#"
[market]
n = 2
horizon = 1.0
drift = [0.05, 0.06]
vol = [0.2, 0.0, 0.0, 0.3]
"#;

#[test]
fn minimal_simulate_writes_files() {
    let out = TempDir::new().unwrap();
    let o = run("simulate", &config_dir().join("minimal.toml"), out.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["summary.csv", "summary.json", "manifest.json"] {
        assert!(out.path().join(f).exists(), "{f}");
    }
}

#[test]
fn malformed_vol_names_the_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "bad.toml", &RUNNING.replace("vol = [0.2, 0.0, 0.0, 0.3]", "vol = [0.2, 0.0, 0.3]"));
    let o = run("simulate", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("market.vol"));
}

#[test]
fn missing_config_is_a_config_error() {
    let o = bin().arg("verify").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = bin().args(["verify", "--config", "/nonexistent/run.toml"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulated_density_mean_is_one() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "run.toml", &format!("{RUNNING}\n[sim]\npaths = 20000\nsteps = 10\nseed = 3\n"));
    let o = run("simulate", &cfg, dir.path(), &[]);
    assert!(o.status.success());
    let csv = dir.path().join("summary.csv");
    let last = rows(&csv).pop().unwrap();
    let mean: f64 = last[column(&csv, "z_mean")].parse().unwrap();
    let var: f64 = last[column(&csv, "z_var")].parse().unwrap();
    let se = (var / 20000.0).sqrt();
    assert!((mean - 1.0).abs() <= 3.0 * se, "{mean} +- {se}");
    let t: f64 = last[column(&csv, "t")].parse().unwrap();
    assert_eq!(t, 1.0);
}

#[test]
fn log_replication_passes_pathwise() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "run.toml",
        &format!("{RUNNING}\n[utility]\nfamily = \"log\"\n[sim]\npaths = 2000\nsteps = 20\n"),
    );
    let o = run("replicate", &cfg, dir.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = rows(&dir.path().join("replication.csv"));
    let pathwise = report.iter().find(|r| &r[1] == "replication.pathwise_max").unwrap();
    assert_eq!(&pathwise[6], "true");
    let samples = dir.path().join("strategy_samples.csv");
    assert_eq!(rows(&samples).len(), 5 * 21);
    let pi1 = column(&samples, "pi_1");
    let z = column(&samples, "z");
    // log optimum holds Q a~ Z: 0.05/0.04 of the first stock per unit Z
    for r in rows(&samples) {
        let (p, z): (f64, f64) = (r[pi1].parse().unwrap(), r[z].parse().unwrap());
        assert!((p - 1.25 * z).abs() < 1e-12);
    }
}

#[test]
fn goal_without_risk_fails_calibration() {
    let dir = TempDir::new().unwrap();
    let text = RUNNING.replace("drift = [0.05, 0.06]", "drift = [0.0, 0.0]") + "\n[utility]\nfamily = \"goal\"\nalpha = 2.0\n";
    let cfg = write_config(&dir, "run.toml", &text);
    let o = run("replicate", &cfg, dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn power_replication_cross_checks_closed_form() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "run.toml",
        &format!("{RUNNING}\n[utility]\nfamily = \"power\"\ndelta = 0.5\n[sim]\npaths = 1000\nsteps = 20\n"),
    );
    let o = run("replicate", &cfg, dir.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = rows(&dir.path().join("replication.csv"));
    let cross = report.iter().find(|r| &r[1] == "replication.heat_crosscheck").unwrap();
    assert_eq!(&cross[6], "true");
    assert!(report.iter().any(|r| &r[1] == "replication.pathwise_max" && &r[6] == "true"));
}

fn selected(path: &Path, m: usize) -> Vec<String> {
    rows(path)
        .into_iter()
        .filter(|r| r[2] == *m.to_string() && &r[column(path, "selected")] == "true")
        .map(|r| r[3].to_string())
        .collect()
}

#[test]
fn selection_flags_best_subsets() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "run.toml", &format!("{RUNNING}\n[compress]\nm = 2\n"));
    let o = run("select", &cfg, dir.path(), &[]);
    assert!(o.status.success());
    let csv = dir.path().join("selection.csv");
    assert_eq!(selected(&csv, 1), vec!["{1}"]);
    assert_eq!(selected(&csv, 2), vec!["{1,2}"]);
    assert_eq!(rows(&csv).len(), 2 + 3);
}

#[test]
fn twelve_choose_six_selection_completes() {
    let n = 12;
    let drift: Vec<String> = (0..n).map(|i| format!("{}", 0.02 + 0.005 * i as f64)).collect();
    let mut vol = vec!["0.0".to_string(); n * n];
    for i in 0..n {
        vol[i * n + i] = format!("{}", 0.15 + 0.01 * i as f64);
        if i > 0 {
            vol[i * n + i - 1] = "0.03".into();
        }
    }
    let text = format!(
        "[market]\nn = {n}\nhorizon = 1.0\ndrift = [{}]\nvol = [{}]\n\n[compress]\nm = 6\n",
        drift.join(", "),
        vol.join(", ")
    );
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "run.toml", &text);
    let o = run("select", &cfg, dir.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = dir.path().join("selection.csv");
    let size6 = rows(&csv).iter().filter(|r| &r[2] == "6" && &r[4] == "6").count();
    assert_eq!(size6, 924);
    assert_eq!(selected(&csv, 6).len(), 1);
}

#[test]
fn verify_exit_codes() {
    let out = TempDir::new().unwrap();
    let o = run("verify", &config_dir().join("running_example.toml"), out.path(), &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["passed"], true);

    let out = TempDir::new().unwrap();
    let o = run("verify", &config_dir().join("negative_control.toml"), out.path(), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(out.path().join("checks.csv").exists());

    let out = TempDir::new().unwrap();
    let o = run("verify", &config_dir().join("degenerate.toml"), out.path(), &[]);
    assert!(o.status.success());
    let checks = rows(&out.path().join("checks.csv"));
    assert!(checks.iter().any(|r| &r[1] == "trivial.strategy" && &r[6] == "true"));
    assert!(checks.iter().all(|r| &r[6] == "true"));
}

#[test]
fn outputs_are_reproducible_and_carry_the_hash() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "run.toml",
        &format!("{RUNNING}\n[utility]\nfamily = \"log\"\n[sim]\npaths = 3000\nsteps = 10\n"),
    );
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(run("simulate", &cfg, &a, &[]).status.success());
    assert!(run("simulate", &cfg, &b, &["--threads", "3"]).status.success());
    assert!(run("simulate", &cfg, &c, &["--seed", "99"]).status.success());
    for f in ["summary.csv", "summary.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let hash = |d: &Path| rows(&d.join("summary.csv"))[0][0].to_string();
    assert_ne!(hash(&a), hash(&c));
    for f in ["summary.json", "manifest.json"] {
        assert!(fs::read_to_string(a.join(f)).unwrap().contains(&hash(&a)));
    }
    assert!(rows(&a.join("summary.csv")).iter().all(|r| r[0] == hash(&a)));
}

#[test]
fn csv_only_output_skips_json_summaries() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "run.toml",
        &format!("{RUNNING}\n[sim]\npaths = 100\nsteps = 2\n[output]\nformats = [\"csv\"]\n"),
    );
    assert!(run("simulate", &cfg, dir.path(), &[]).status.success());
    assert!(dir.path().join("summary.csv").exists());
    assert!(!dir.path().join("summary.json").exists());
    assert!(dir.path().join("manifest.json").exists());
}
