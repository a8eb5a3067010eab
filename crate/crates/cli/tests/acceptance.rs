//! Full-scale acceptance suite: one PASS/FAIL line per criterion A1–A13.

use std::collections::BTreeMap;
use std::io::Write;

use stosym_cli::config::ExperimentConfig;
use stosym_cli::experiments::EXPERIMENTS;
use stosym_cli::report::Check;

const SEED: u64 = 20240601;

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let mut by_criterion: BTreeMap<usize, Vec<(String, Check)>> = BTreeMap::new();
    let mut errors = Vec::new();
    for exp in EXPERIMENTS {
        let cfg = ExperimentConfig::from_json(&format!(r#"{{"experiment": "{}", "seed": {SEED}}}"#, exp.name)).unwrap();
        let report = stosym_cli::run(&cfg, Some(&dir.path().join(exp.name)), None).unwrap();
        if let Some(e) = report.error {
            errors.push(format!("{}: {e}", exp.name));
        }
        for c in report.checks {
            let idx: usize = c.criterion.trim_start_matches('A').parse().unwrap();
            by_criterion.entry(idx).or_default().push((exp.name.to_string(), c));
        }
    }
    let mut failed = Vec::new();
    // Start on a fresh line after the harness's `test ... ` prefix.
    writeln!(std::io::stdout()).unwrap();
    for idx in 1..=13 {
        let checks = by_criterion.get(&idx).map(Vec::as_slice).unwrap_or(&[]);
        let pass = !checks.is_empty() && checks.iter().all(|(_, c)| c.pass);
        let detail: Vec<String> =
            checks.iter().map(|(e, c)| format!("{}{}/{}={:.3e}", if c.pass { "" } else { "!" }, e, c.name, c.value)).collect();
        // Written to the handle directly so the lines survive output capture.
        writeln!(std::io::stdout(), "A{idx} {} {}", if pass { "PASS" } else { "FAIL" }, detail.join(" ")).unwrap();
        if !pass {
            failed.push(format!("A{idx}"));
        }
    }
    assert!(errors.is_empty(), "experiment errors: {errors:?}");
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
