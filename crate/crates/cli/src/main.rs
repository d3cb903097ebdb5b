use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use cil_core::experiment::{compare, generate_data, run_experiment, DataSpec, ExperimentConfig, ExperimentReport};
use cil_core::parallel::Exec;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cil", about = "Class-incremental learning with frozen partial classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.csv and test.csv for a Gaussian-blob spec.
    GenerateData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one or more experiment configs; each writes report.json and curves.csv.
    Run {
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        /// Run configs one after another instead of in parallel.
        #[arg(long)]
        sequential: bool,
    },
    /// Tabulate median final accuracy across reports.
    Compare {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Directory for comparison.csv and merged_curves.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { spec, out } => {
            let spec = DataSpec::load(&spec).with_context(|| format!("loading {}", spec.display()))?;
            let (train, test) = generate_data(&spec, &out)?;
            println!("wrote {} and {}", train.display(), test.display());
        }
        Command::Run { configs, sequential } => {
            let loaded = configs
                .iter()
                .map(|p| ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            for (cfg, path) in loaded.iter().zip(&configs) {
                anyhow::ensure!(cfg.output_dir.is_some(), "{}: output_dir is required", path.display());
            }
            let exec = if sequential { Exec::Sequential } else { Exec::default() };
            let results = exec.map(&loaded, run_experiment);
            let mut failed = 0;
            for ((res, cfg), path) in results.into_iter().zip(&loaded).zip(&configs) {
                match res {
                    Ok(r) => println!(
                        "{}: {} final accuracy {:.4} -> {}",
                        path.display(),
                        r.method,
                        r.final_accuracy,
                        cfg.output_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
                    ),
                    Err(e) => {
                        failed += 1;
                        eprintln!("{}: error: {e}", path.display());
                    }
                }
            }
            anyhow::ensure!(failed == 0, "{failed} of {} runs failed", configs.len());
        }
        Command::Compare { reports, out } => {
            let loaded = reports
                .iter()
                .map(|p| ExperimentReport::load(p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let cmp = compare(&loaded)?;
            print!("{}", cmp.render());
            if let Some(dir) = out {
                for p in cmp.write(&dir)? {
                    println!("wrote {}", p.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
