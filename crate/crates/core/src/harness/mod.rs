//! Configuration loading, experiment dispatch and report emission.

pub mod config;
pub mod report;
mod run;

use std::fmt;
use std::str::FromStr;

pub use config::{load_config, Config};
pub use report::{Check, ExperimentReport, Format, Table, SCHEMA_VERSION};
pub use run::run;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HarnessError {
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("unknown output format `{0}` (expected json or csv)")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("report: {0}")]
    Report(String),
    #[error("{experiment}: {message}")]
    Experiment {
        experiment: &'static str,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    Bench,
    Algorithm1,
    DemoteTime,
    PageLevels,
    Covert,
    Kaslr,
    Evset,
    ReverseLlc,
    ReverseDir,
    Taxonomy,
}

impl Experiment {
    pub const ALL: [Experiment; 10] = [
        Experiment::Bench,
        Experiment::Algorithm1,
        Experiment::DemoteTime,
        Experiment::PageLevels,
        Experiment::Covert,
        Experiment::Kaslr,
        Experiment::Evset,
        Experiment::ReverseLlc,
        Experiment::ReverseDir,
        Experiment::Taxonomy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Bench => "bench",
            Experiment::Algorithm1 => "algorithm1",
            Experiment::DemoteTime => "demote-time",
            Experiment::PageLevels => "page-levels",
            Experiment::Covert => "covert",
            Experiment::Kaslr => "kaslr",
            Experiment::Evset => "evset",
            Experiment::ReverseLlc => "reverse-llc",
            Experiment::ReverseDir => "reverse-dir",
            Experiment::Taxonomy => "taxonomy",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| HarnessError::UnknownExperiment(s.to_string()))
    }
}

#[cfg(test)]
mod tests;
