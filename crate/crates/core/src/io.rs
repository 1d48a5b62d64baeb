//! Run directories: manifest, CSV tables and JSON records.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use thiserror::Error;

use crate::config::{format_f64, RunConfig};
use crate::scenarios::{Cell, CheckResult, Derived, ReportQuantity, ScenarioReport, Table};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn cell_text(c: &Cell) -> String {
    match c {
        Cell::Float(x) => format_f64(*x),
        Cell::Int(i) => i.to_string(),
        Cell::Text(s) => s.clone(),
        Cell::Bool(b) => b.to_string(),
        Cell::Empty => String::new(),
    }
}

/// Writes a table as CSV: one header row, fixed column order, shortest
/// round-trip floats.
pub fn emit_csv(table: &Table, path: &Path) -> Result<(), IoError> {
    let csv_err = |source| IoError::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&table.columns).map_err(csv_err)?;
    for row in &table.rows {
        w.write_record(row.iter().map(cell_text)).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Pretty-printed JSON with a trailing newline.
pub fn emit_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(text.as_bytes()).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSummary {
    pub z_min: f64,
    pub z_max: f64,
    pub n: usize,
    pub dz: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub status: RunStatus,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub config: RunConfig,
    /// The same configuration in the input format; parses back to `config`.
    pub config_toml: String,
    pub grid: GridSummary,
    pub derived: Option<Derived>,
    pub checks_passed: Option<bool>,
    pub error: Option<String>,
    pub files: Vec<String>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    name: &'a str,
    quantities: &'a [ReportQuantity],
    checks: &'a [CheckResult],
    derived: &'a Derived,
}

/// A run directory. The manifest is written on creation and rewritten when
/// the run finishes or fails.
#[derive(Debug)]
pub struct RunDirectory {
    dir: PathBuf,
    manifest: RunManifest,
}

impl RunDirectory {
    pub fn create(dir: &Path, command: &str, config: &RunConfig) -> Result<Self, IoError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let g = &config.grid;
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            status: RunStatus::Running,
            started_unix: unix_now(),
            finished_unix: None,
            config: config.clone(),
            config_toml: config.to_toml(),
            grid: GridSummary { z_min: g.z_min, z_max: g.z_max, n: g.n, dz: (g.z_max - g.z_min) / g.n as f64, dt: g.dt },
            derived: None,
            checks_passed: None,
            error: None,
            files: Vec::new(),
        };
        let run = Self { dir: dir.to_path_buf(), manifest };
        run.write_manifest()?;
        Ok(run)
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn write_manifest(&self) -> Result<(), IoError> {
        emit_json(&self.manifest, &self.dir.join("manifest.json"))
    }

    /// Writes every table, the report, events and snapshots, then the final manifest.
    pub fn finish(&mut self, report: &ScenarioReport) -> Result<(), IoError> {
        let mut files = Vec::new();
        for t in &report.tables {
            let name = format!("{}.csv", t.name);
            emit_csv(t, &self.dir.join(&name))?;
            files.push(name);
        }
        let file = ReportFile {
            name: &report.name,
            quantities: &report.quantities,
            checks: &report.checks,
            derived: &report.derived,
        };
        emit_json(&file, &self.dir.join("report.json"))?;
        files.push("report.json".into());
        if !report.events.is_empty() {
            emit_json(&report.events, &self.dir.join("events.json"))?;
            files.push("events.json".into());
        }
        if !report.snapshots.is_empty() {
            emit_json(&report.snapshots, &self.dir.join("snapshots.json"))?;
            files.push("snapshots.json".into());
        }
        self.manifest.files = files;
        self.manifest.derived = Some(report.derived.clone());
        self.manifest.checks_passed = Some(report.all_passed());
        self.manifest.status = RunStatus::Complete;
        self.manifest.finished_unix = Some(unix_now());
        self.write_manifest()
    }

    pub fn fail(&mut self, error: &str) -> Result<(), IoError> {
        self.manifest.status = RunStatus::Failed;
        self.manifest.error = Some(error.to_string());
        self.manifest.finished_unix = Some(unix_now());
        self.write_manifest()
    }
}
