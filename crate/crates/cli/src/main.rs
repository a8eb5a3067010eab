use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stosym_cli::config::ExperimentConfig;
use stosym_cli::RunError;

#[derive(Parser)]
#[command(name = "stosym", version, about = "Symmetry experiments for geometrical SDEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
}

fn main() -> ExitCode {
    let Command::Run { config, out, seed_override } = Cli::parse().command;
    let result =
        ExperimentConfig::from_file(&config).map_err(RunError::from).and_then(|cfg| stosym_cli::run(&cfg, out.as_deref(), seed_override));
    match result {
        Ok(report) => {
            for c in &report.checks {
                let rel = match c.relation {
                    stosym_cli::report::Relation::AtMost => "<=",
                    stosym_cli::report::Relation::AtLeast => ">=",
                };
                println!("{} {} {}: {:.3e} {rel} {:.3e}", if c.pass { "PASS" } else { "FAIL" }, c.criterion, c.name, c.value, c.threshold);
            }
            if let Some(e) = &report.error {
                eprintln!("error: {e}");
            }
            println!("{}: {}", report.experiment, if report.pass { "PASS" } else { "FAIL" });
            if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
