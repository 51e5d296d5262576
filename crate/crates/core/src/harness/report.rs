use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Config;
use super::HarnessError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

/// A per-sample table, written as a CSV sidecar.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| HarnessError::Report(e.to_string());
        w.write_record(&self.columns).map_err(err)?;
        for r in &self.rows {
            w.write_record(r).map_err(err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| HarnessError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| HarnessError::Report(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            _ => Err(HarnessError::Format(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment: String,
    pub seed: u64,
    pub clock_ghz: f64,
    pub config: Config,
    pub metrics: serde_json::Value,
    pub checks: Vec<Check>,
    #[serde(skip)]
    pub tables: BTreeMap<String, Table>,
}

impl ExperimentReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> Result<String, HarnessError> {
        serde_json::to_string_pretty(self).map_err(|e| HarnessError::Report(e.to_string()))
    }

    /// Metrics and checks only, for comparing runs.
    pub fn metric_section(&self) -> Result<String, HarnessError> {
        serde_json::to_string(&(&self.metrics, &self.checks))
            .map_err(|e| HarnessError::Report(e.to_string()))
    }

    fn summary_table(&self) -> Table {
        let mut t = Table::new(&["check", "pass", "detail"]);
        for c in &self.checks {
            t.push(vec![c.name.clone(), c.pass.to_string(), c.detail.clone()]);
        }
        t
    }

    /// Writes the report into `dir` and returns the written paths.
    pub fn write(&self, dir: &Path, format: Format) -> Result<Vec<PathBuf>, HarnessError> {
        let io = |path: &Path, e: std::io::Error| HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let mut files: Vec<(PathBuf, String)> = Vec::new();
        match format {
            Format::Json => files.push((
                dir.join(format!("{}.json", self.experiment)),
                self.to_json()?,
            )),
            Format::Csv => files.push((
                dir.join(format!("{}_summary.csv", self.experiment)),
                self.summary_table().to_csv()?,
            )),
        }
        for (name, table) in &self.tables {
            files.push((
                dir.join(format!("{}_{name}.csv", self.experiment)),
                table.to_csv()?,
            ));
        }
        let mut written = Vec::new();
        for (path, body) in files {
            std::fs::write(&path, body).map_err(|e| io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}
