//! Command line front end.
//!
//! Exit codes: 0 success, 2 bad input or config, 3 runtime failure,
//! 4 a check that ran to completion and failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kdeflow::harness::{
    bound_check, check_schedule_request, load_config, oracle_step, plot_run, resolve,
    run_experiment,
};
use kdeflow::{KdeflowError, Result};

#[derive(Parser)]
#[command(
    name = "kdeflow",
    version,
    about = "Particle solver for diffusion-type gradient flows with kernel density steps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config file
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides out_dir from the config
        #[arg(long)]
        out: Option<PathBuf>,
        /// Render the SVG charts right after the run
        #[arg(long)]
        plot: bool,
    },
    /// Check a parameter schedule for admissibility as tau shrinks
    CheckSchedule {
        /// JSON request: law, kernel, d, and either taus or explicit points
        #[arg(long)]
        request: PathBuf,
    },
    /// Compare one relaxed step against the exhaustive grid oracle
    OracleStep {
        #[arg(long)]
        config: PathBuf,
        /// Abort if the oracle would enumerate more configurations than this
        #[arg(long, default_value_t = 1e6)]
        budget: f64,
    },
    /// Verify the particle-sum coupling bounds on sampled configurations
    BoundCheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render SVG charts from a finished run directory
    Plot {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                KdeflowError::Config(_) | KdeflowError::Json(_) | KdeflowError::Io(_) => 2u8,
                _ => 3u8,
            })
        }
    }
}

/// Prints a line to stdout, shrugging off a closed pipe (`kdeflow ... | head`).
fn emit(text: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{text}");
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run { config, out, plot } => {
            let config = load_config(&config)?;
            for warning in resolve(&config)?.warnings {
                eprintln!("warning: {warning}");
            }
            let artifacts = run_experiment(&config, out.as_deref())?;
            emit(&serde_json::to_string_pretty(&artifacts)?);
            if plot {
                for path in plot_run(&artifacts.out_dir)? {
                    eprintln!("wrote {}", path.display());
                }
            }
            if artifacts.sane {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("run finished but failed its sanity checks; see FAILED marker");
                Ok(ExitCode::from(4))
            }
        }
        Command::CheckSchedule { request } => {
            let text = std::fs::read_to_string(&request)?;
            let report = check_schedule_request(&text)?;
            emit(&serde_json::to_string_pretty(&report)?);
            Ok(if report.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(4)
            })
        }
        Command::OracleStep { config, budget } => {
            let config = load_config(&config)?;
            let report = oracle_step(&config, budget)?;
            emit(&serde_json::to_string_pretty(&report)?);
            Ok(if report.within_budget {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(4)
            })
        }
        Command::BoundCheck {
            config,
            cases,
            seed,
        } => {
            let config = load_config(&config)?;
            let report = bound_check(&config, cases, seed)?;
            emit(&serde_json::to_string_pretty(&report)?);
            Ok(if report.all_hold {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(4)
            })
        }
        Command::Plot { run_dir } => {
            for path in plot_run(&run_dir)? {
                emit(&format!("wrote {}", path.display()));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
