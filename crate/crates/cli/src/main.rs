use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpadmm::experiment::{check, run_experiment, summarize, ExperimentConfig};
use dpadmm::Error;

/// Run and summarize differentially private ADMM experiment grids.
#[derive(Parser, Debug)]
#[command(name = "dpadmm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every cell and repetition of a config, writing metrics and a summary.
    Run {
        config: PathBuf,
        /// Override a config entry, e.g. `--set run.rounds=50`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory, replacing `output.dir`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Validate a config and list its cells without running.
    Check {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Build round-by-round figure tables from a results directory.
    Summarize { dir: PathBuf },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Solver { .. } => 2,
        _ => 1,
    }
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            mut overrides,
            output,
        } => {
            if let Some(dir) = output {
                overrides.push(format!("output.dir={:?}", dir.display().to_string()));
            }
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let report = run_experiment(&cfg)?;
            println!(
                "{} runs over {} cells written to {}",
                report.runs.len(),
                report.cells.len(),
                report.output_dir.display()
            );
        }
        Command::Check { config, overrides } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let cells = check(&cfg)?;
            for c in &cells {
                println!("{}", c.name());
            }
            println!(
                "ok: {} cells x {} repetitions, output {}",
                cells.len(),
                cfg.run.repetitions,
                cfg.output_dir().display()
            );
        }
        Command::Summarize { dir } => {
            let tables = summarize(&dir)?;
            for f in &tables.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solver_failures_get_their_own_code() {
        let solver = Error::Solver {
            message: "stalled".into(),
            gradient_norm: 1.0,
            penalty: 1e4,
            iterations: 50,
        };
        assert_eq!(exit_code(&solver), 2);
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
    }
}
