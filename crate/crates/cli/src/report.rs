use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use stosym_core::CadlagPath;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// Passes when `value ≤ threshold`.
    AtMost,
    /// Passes when `value ≥ threshold`.
    AtLeast,
}

/// One pass/fail line of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub criterion: String,
    pub name: String,
    pub value: f64,
    pub relation: Relation,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(criterion: &str, name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { criterion: criterion.into(), name: name.into(), value, relation: Relation::AtMost, threshold, pass: value <= threshold }
    }

    pub fn at_least(criterion: &str, name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { criterion: criterion.into(), name: name.into(), value, relation: Relation::AtLeast, threshold, pass: value >= threshold }
    }
}

/// A numeric table written as `<name>.csv`.
#[derive(Clone, Debug)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.into(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        self.rows.push(row);
    }
}

/// What an experiment returns before anything touches the disk.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub tables: Vec<Table>,
    pub paths: Vec<(String, CadlagPath)>,
}

impl Outcome {
    pub fn pass(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }
}

/// Contents of `report.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub experiment: String,
    pub criteria: Vec<String>,
    pub seed: u64,
    pub generator: String,
    pub parameters: BTreeMap<String, Value>,
    pub checks: Vec<Check>,
    pub artifacts: Vec<String>,
    pub error: Option<String>,
    pub pass: bool,
}
