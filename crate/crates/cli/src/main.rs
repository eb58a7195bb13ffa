use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use opera_core::fe_dimension::{fe_dimension, CouplingTable, DEFAULT_CAP};
use opera_core::{run_checkers, run_experiment, ExperimentConfig, OperaError, Suite};

/// OPERA experiment runner and structural checkers.
#[derive(Debug, Parser)]
#[command(name = "opera", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run OPERA over seeds and write CSV/JSON/SVG outputs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `num_seeds` in the config.
        #[arg(long)]
        seeds: Option<usize>,
        /// Overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checker suite on the configured instance.
    Check {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Functional eluder dimension of a coupling table.
    Fedim {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: usize,
    },
}

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn exit_code(err: &OperaError) -> u8 {
    match err {
        OperaError::Config(_) | OperaError::InvalidInput(_) | OperaError::Json(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn load_config(path: &Path) -> Result<(ExperimentConfig, PathBuf), OperaError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| OperaError::Config(format!("cannot read {}: {e}", path.display())))?;
    let config = ExperimentConfig::from_json(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((config, base))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), OperaError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(command: Command) -> Result<u8, OperaError> {
    match command {
        Command::Run { config, seeds, out } => {
            let (mut cfg, base) = load_config(&config)?;
            if let Some(n) = seeds {
                cfg.num_seeds = n;
                cfg.seeds = None;
            }
            if let Some(dir) = out {
                cfg.output_dir = Some(std::path::absolute(dir)?);
            }
            cfg.validate()?;
            let report = run_experiment(&cfg, &base)?;
            for f in &report.failed {
                eprintln!("seed {} ({}) failed: {}", f.seed_index, f.seed, f.error);
            }
            println!(
                "{} seeds ok, {} failed; mean cumulative regret {:.6}; f* always feasible in {:.1}% of runs",
                report.seeds.len(),
                report.failed.len(),
                report.mean_regret_at(report.curve.len()),
                100.0 * report.feasibility_frequency
            );
            if report.self_check == Some(false) {
                eprintln!("aggregate does not match the per-seed CSVs");
                return Ok(EXIT_FAIL);
            }
            Ok(if report.failed.is_empty() { 0 } else { EXIT_RUNTIME })
        }
        Command::Check { suite, config } => {
            let suite: Suite = suite.parse()?;
            let (cfg, base) = load_config(&config)?;
            let report = run_checkers(&cfg, suite, &base)?;
            print_json(&report)?;
            Ok(if report.passed { 0 } else { EXIT_FAIL })
        }
        Command::Fedim { table, epsilon, cap } => {
            let text = std::fs::read_to_string(&table)
                .map_err(|e| OperaError::Config(format!("cannot read {}: {e}", table.display())))?;
            let table = CouplingTable::from_json(&text)?;
            print_json(&fe_dimension(&table, epsilon, cap)?)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
