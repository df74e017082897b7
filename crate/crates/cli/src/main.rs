use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use exdrl_core::harness::{self, ReportFormat, RunConfig};
use exdrl_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "exdrl", version, about = "Train and evaluate gamma-hedging agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent; writes checkpoint.json and metrics.csv to output_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on fresh scenarios.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate every (volatility, risk measure) cell of the config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Evaluate this checkpoint in every cell instead of training per cell.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Render saved reports from a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

/// Any failure to read or parse the config file counts as a config error.
fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|e| Failure::Config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let outcome = harness::run_train(&cfg)?;
            println!(
                "trained {} steps; checkpoint written to {}",
                outcome.checkpoint.steps,
                cfg.output_dir.join(harness::CHECKPOINT_FILE).display()
            );
        }
        Command::Eval { checkpoint, config } => {
            let cfg = load_config(&config)?;
            let ck = harness::load_checkpoint(&checkpoint)?;
            let report = harness::run_eval(&ck, &cfg)?;
            harness::save_report(&report, &cfg.output_dir)?;
            harness::emit_report(std::slice::from_ref(&report), &cfg.output_dir, ReportFormat::Csv)?;
            print!("{}", harness::summary_csv(std::slice::from_ref(&report)));
        }
        Command::Sweep { config, checkpoint } => {
            let cfg = load_config(&config)?;
            let ck = checkpoint.as_deref().map(harness::load_checkpoint).transpose()?;
            let reports = harness::run_sweep(&cfg, ck.as_ref())?;
            for r in &reports {
                harness::save_report(r, &cfg.output_dir)?;
            }
            let table = harness::sweep_csv(&reports);
            let path = cfg.output_dir.join("sweep.csv");
            std::fs::write(&path, &table).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            print!("{table}");
        }
        Command::Report { input, format } => {
            let format: ReportFormat = format.parse()?;
            let reports = harness::load_reports(&input)?;
            for p in harness::emit_report(&reports, &input, format)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
