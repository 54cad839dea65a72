//! CSV and JSON writers. Floats use 17 significant digits so values
//! round-trip exactly, and every file carries the config hash.

use std::fs;
use std::path::{Path, PathBuf};

use optfolio::CheckReport;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn opt_float(x: Option<f64>) -> String {
    x.map(float).unwrap_or_default()
}

/// Rows of one CSV file; the `config_hash` column is prepended on write.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// Collects the files of one command run under the output directory.
pub struct Writer<'a> {
    config: &'a RunConfig,
    command: &'static str,
    files: Vec<String>,
}

impl<'a> Writer<'a> {
    pub fn new(config: &'a RunConfig, command: &'static str) -> Result<Self, CliError> {
        fs::create_dir_all(&config.out_dir)?;
        Ok(Self {
            config,
            command,
            files: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    pub fn csv(&mut self, name: &str, table: &Table) -> Result<(), CliError> {
        if !self.config.csv {
            return Ok(());
        }
        let mut w = csv::Writer::from_path(self.path(name))?;
        let mut header = vec!["config_hash".to_string()];
        header.extend(table.header.iter().cloned());
        w.write_record(&header)?;
        for row in &table.rows {
            w.write_record(std::iter::once(self.config.hash.as_str()).chain(row.iter().map(String::as_str)))?;
        }
        w.flush()?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        if !self.config.json {
            return Ok(());
        }
        write_json(&self.path(name), value)?;
        self.files.push(name.to_string());
        Ok(())
    }

    /// Writes `manifest.json`, always, listing the files written before it.
    pub fn finish(self) -> Result<(), CliError> {
        let manifest = Manifest {
            command: self.command,
            config_hash: &self.config.hash,
            seed: self.config.sim.seed,
            paths: self.config.sim.paths,
            steps: self.config.sim.steps,
            versions: Versions {
                optfolio: optfolio::VERSION,
                optfolio_cli: env!("CARGO_PKG_VERSION"),
            },
            files: &self.files,
        };
        write_json(&self.path("manifest.json"), &manifest)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct Versions {
    optfolio: &'static str,
    optfolio_cli: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    paths: usize,
    steps: usize,
    versions: Versions,
    files: &'a [String],
}

/// Check reports as CSV rows.
pub fn check_table(reports: &[CheckReport]) -> Table {
    let mut t = Table::new(["name", "target", "estimate", "std_error", "tolerance", "passed"]);
    for r in reports {
        t.push(vec![
            r.name.clone(),
            float(r.target),
            float(r.estimate),
            opt_float(r.std_error),
            float(r.tolerance),
            r.passed.to_string(),
        ]);
    }
    t
}
