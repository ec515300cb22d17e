use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use varnet_cli::commands;
use varnet_cli::config::RunConfig;

/// Communication-aware reactive-power control for distribution feeders:
/// generate data, train the two-tier policy, and benchmark it.
#[derive(Debug, Parser)]
#[command(name = "varnet", version)]
struct Cli {
    /// Configuration file: flat `key = value` lines under `[section]`
    /// headers. Missing keys fall back to built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one setting, e.g. `--set train.epochs=5`. Repeatable;
    /// overrides win over the configuration file.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the bundled 13-bus feeder fixture and synthetic traces.
    GenData,
    /// Train the two-tier policy on the training window.
    Train,
    /// Score the trained model against the baselines on the test window.
    Evaluate,
    /// Merge previously written report CSVs into a comparison table.
    Compare {
        /// Report CSV files; defaults to `<run_dir>/report.csv`.
        reports: Vec<PathBuf>,
    },
}

fn run(cli: &Cli) -> varnet_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for assignment in &cli.overrides {
        cfg.apply_override(assignment)?;
    }
    match &cli.command {
        Command::GenData => commands::cmd_gen_data(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Evaluate => commands::cmd_evaluate(&cfg),
        Command::Compare { reports } => commands::cmd_compare(&cfg, reports),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // plain failure (exit 2 is reserved for numerical divergence).
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ varnet_core::Error::Divergence { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
