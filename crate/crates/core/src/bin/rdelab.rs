use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rdelab::config::{self, ExperimentKind};
use rdelab::experiment::{self, RunOptions};

#[derive(Parser)]
#[command(name = "rdelab", version, about = "Monte Carlo experiments for diffusions in random environment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads (default: hardware parallelism).
        #[arg(long)]
        workers: Option<usize>,
        /// Output directory (overrides `output_dir`).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Replaces `environment.master_seed`.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Check a configuration without simulating.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// List the experiment families.
    ListExperiments,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            workers,
            output,
            seed_override,
        } => {
            let opts = RunOptions {
                workers,
                output,
                seed_override,
            };
            match config::load(&config).and_then(|c| experiment::run(&c, &opts)) {
                Ok(manifest) => {
                    println!("{}", serde_json::to_string_pretty(&manifest).expect("manifest serializes"));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Validate { config } => match config::load(&config) {
            Ok(loaded) => {
                let errors = loaded.config.validate();
                if errors.is_empty() {
                    println!("ok: {} ({})", config.display(), loaded.config.experiment);
                    ExitCode::SUCCESS
                } else {
                    for e in &errors {
                        println!("{e}");
                    }
                    ExitCode::FAILURE
                }
            }
            Err(e) => {
                println!("{e}");
                ExitCode::FAILURE
            }
        },
        Command::ListExperiments => {
            for k in ExperimentKind::ALL {
                println!("{:<18} {}", k.name(), k.description());
            }
            ExitCode::SUCCESS
        }
    }
}
