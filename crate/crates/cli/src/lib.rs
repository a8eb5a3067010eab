//! Config-driven experiment runner behind the `stosym` binary.

pub mod config;
pub mod experiments;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context as _;

use config::{ConfigError, ExperimentConfig, Params};
use report::{Outcome, Report, Table};

/// Name of the random generator recorded in every report.
pub const GENERATOR: &str = "ChaCha20 (rand_chacha 0.9)";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0:#}")]
    Io(anyhow::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Io(_) => 1,
        }
    }
}

/// Runs one configured experiment and writes its artifacts.
///
/// Configuration problems are returned before any output is produced. A
/// failing experiment still writes a report with `error` filled in.
pub fn run(cfg: &ExperimentConfig, out: Option<&Path>, seed_override: Option<u64>) -> Result<Report, RunError> {
    let exp = experiments::find(&cfg.experiment)?;
    let params = Params::new(cfg.params.clone());
    experiments::validate(exp, &params)?;
    let dir: PathBuf = match (out, &cfg.output_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(ConfigError::NoOutput.into()),
    };
    let seed = seed_override.unwrap_or(cfg.seed);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).map_err(RunError::Io)?;

    let runner_params = Params::new(cfg.params.clone());
    let result = experiments::run(exp, seed, &runner_params);
    let mut report = Report {
        experiment: exp.name.into(),
        criteria: exp.criteria.iter().map(|s| s.to_string()).collect(),
        seed,
        generator: GENERATOR.into(),
        parameters: runner_params.effective(),
        checks: vec![],
        artifacts: vec![],
        error: None,
        pass: false,
    };
    match result {
        Ok(outcome) => {
            report.artifacts = write_artifacts(&dir, &outcome).map_err(RunError::Io)?;
            report.pass = outcome.pass();
            report.checks = outcome.checks;
        }
        Err(e) => report.error = Some(format!("{e:#}")),
    }
    let text = serde_json::to_string_pretty(&report).expect("reports serialize");
    fs::write(dir.join("report.json"), text + "\n").context("writing report.json").map_err(RunError::Io)?;
    Ok(report)
}

fn write_table(path: &Path, table: &Table) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_artifacts(dir: &Path, outcome: &Outcome) -> anyhow::Result<Vec<String>> {
    let mut names = Vec::new();
    for t in &outcome.tables {
        let name = format!("{}.csv", t.name);
        write_table(&dir.join(&name), t).with_context(|| format!("writing {name}"))?;
        names.push(name);
    }
    for (label, path) in &outcome.paths {
        let name = format!("path_{label}.csv");
        path.save_csv(&dir.join(&name)).with_context(|| format!("writing {name}"))?;
        names.push(name);
    }
    Ok(names)
}
