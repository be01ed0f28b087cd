use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tpgrad::cli::{self, CliError, ExperimentConfig};

/// Two-point gradient regularization experiments.
#[derive(Parser)]
#[command(name = "tpgrad", version, about)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every noise level of a config; write trace CSVs and summary.json.
    Run {
        /// Path to the TOML experiment config.
        config: PathBuf,
        /// Output directory (overrides TPGRAD_OUT and the config entry).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a config and print the noise-sweep table.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-audit an emitted trace directory against its summary.json.
    Audit {
        /// Directory containing trace_*.csv and summary.json.
        trace_dir: PathBuf,
    },
}

fn run(command: Command) -> Result<usize, CliError> {
    match command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let out_dir = cli::resolve_out_dir(&cfg, out.as_deref());
            let outcome = cli::run_experiment(&cfg, &out_dir)?;
            println!(
                "theta5 = {}; wrote {} trace file(s) and summary.json to {}",
                outcome.summary.theta5,
                outcome.summary.runs.len(),
                outcome.out_dir.display()
            );
            for r in &outcome.summary.runs {
                println!(
                    "  delta {:>10e}: k_delta = {:>5}, stop = {:?}, residual = {:e}, violations = {}",
                    r.delta,
                    r.k_delta,
                    r.stop_reason,
                    r.final_residual,
                    r.report.violation_count()
                );
            }
            if !outcome.summary.sweep_trend_violations.is_empty() {
                for v in &outcome.summary.sweep_trend_violations {
                    eprintln!("trend violation: {v}");
                }
            }
            Ok(outcome.summary.violations)
        }
        Command::Sweep { config, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let out_dir = cli::resolve_out_dir(&cfg, out.as_deref());
            let outcome = cli::run_experiment(&cfg, &out_dir)?;
            match &outcome.summary.sweep {
                Some(table) => print!("{table}"),
                None => println!("sweep table needs at least 3 distinct noise levels"),
            }
            Ok(outcome.summary.violations)
        }
        Command::Audit { trace_dir } => {
            let summary = cli::audit_dir(&trace_dir)?;
            println!(
                "audit of {} clean: {} run(s), {} violation(s) recorded",
                trace_dir.display(),
                summary.runs.len(),
                summary.violations
            );
            Ok(summary.violations)
        }
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args.command) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(n) => {
            eprintln!("{n} theory-invariant violation(s)");
            ExitCode::from(1)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
