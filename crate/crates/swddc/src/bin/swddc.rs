//! Command-line driver for the closed-loop control experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use swddc::harness::{run_trials, ExperimentConfig, FilterKind, ProblemId, SolverKind};

/// Data-driven stochastic optimal control experiments.
#[derive(Parser)]
#[command(name = "swddc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the trials described by a config file and write CSV output.
    Run {
        /// TOML experiment configuration.
        config_file: PathBuf,
        /// Override the trial count.
        #[arg(long)]
        trials: Option<usize>,
        /// Override the base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the CSV files (also settable via the
        /// SWDDC_OUT environment variable; defaults to ./swddc-out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the estimator.
        #[arg(long, value_enum)]
        filter: Option<FilterKind>,
        /// Override the control solver.
        #[arg(long, value_enum)]
        solver: Option<SolverKind>,
        /// Override the particle / ensemble count.
        #[arg(long)]
        particles: Option<usize>,
    },
    /// List the built-in benchmark problems.
    ListExperiments,
    /// Check a config file and report the first problem found, if any.
    Validate {
        /// TOML experiment configuration.
        config_file: PathBuf,
    },
}

fn run() -> Result<(), String> {
    match Cli::parse().command {
        Command::Run {
            config_file,
            trials,
            seed,
            out,
            filter,
            solver,
            particles,
        } => {
            let mut config =
                ExperimentConfig::from_path(&config_file).map_err(|e| e.to_string())?;
            if let Some(t) = trials {
                config.trials = t;
            }
            if let Some(s) = seed {
                config.seed = s;
            }
            if let Some(f) = filter {
                config.filter.kind = f;
            }
            if let Some(s) = solver {
                config.solver.kind = s;
            }
            if let Some(m) = particles {
                config.filter.size = m;
            }
            config.validate().map_err(|e| e.to_string())?;
            let out_dir = out
                .or_else(|| std::env::var_os("SWDDC_OUT").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("swddc-out"));
            let summary = run_trials(&config, Some(&out_dir)).map_err(|e| e.to_string())?;
            println!(
                "{}: {} trial(s) completed, {} failed",
                config.problem,
                summary.records.len(),
                summary.failures.len()
            );
            for (k, err) in &summary.failures {
                eprintln!("trial {k} failed: {err}");
            }
            println!(
                "mean wall-clock per trial: {:.3} s (solver {:.3} s, filter {:.3} s)",
                summary.mean_total_seconds,
                summary.mean_solver_seconds,
                summary.mean_filter_seconds
            );
            println!(
                "final-step parameter RMSE: {:.6}",
                summary.param_rmse.last().copied().unwrap_or(f64::NAN)
            );
            if let Some(c) = &summary.control_rmse {
                println!(
                    "final-step control RMSE: {:.6}",
                    c.last().copied().unwrap_or(f64::NAN)
                );
            }
            if let Some(d) = summary.mean_terminal_distance {
                println!("mean terminal distance to target: {d:.4}");
            }
            println!("CSV output written to {}", out_dir.display());
            Ok(())
        }
        Command::ListExperiments => {
            for id in ProblemId::ALL {
                println!("{:<14} {}", id.name(), id.description());
            }
            println!("\nChecked-in configs live in the configs/ directory.");
            Ok(())
        }
        Command::Validate { config_file } => {
            ExperimentConfig::from_path(&config_file).map_err(|e| e.to_string())?;
            println!("{}: OK", config_file.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
