use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gbp_cli::{replay, run, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "gbp",
    version,
    about = "Gaussian belief propagation scenario runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a scenario under a schedule and write snapshots and metrics.
    Run(RunConfig),
    /// Summarize a snapshot file.
    Replay { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Cmd::Run(config) => match run(&config) {
            Ok(metrics) => {
                let r = &metrics.report;
                println!(
                    "{} iterations, {} messages, residual {:e}, converged {}",
                    r.iterations, r.messages_sent, r.max_message_residual, r.converged
                );
                if let Some(c) = &metrics.comparison {
                    println!(
                        "max mean error vs batch {:e}, overconfident fraction {}",
                        c.max_mean_error, c.overconfident_fraction
                    );
                }
                if let Some(c) = &metrics.classification {
                    println!(
                        "factors: {} grey, {} white, {} red, {} yellow; outliers white {}/{}",
                        c.grey,
                        c.white,
                        c.red,
                        c.yellow,
                        c.outliers_white,
                        c.outliers.len()
                    );
                }
                println!("wrote {}", config.out_dir.display());
                if r.converged {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(2)
                }
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
        Cmd::Replay { path } => match replay(&path) {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        },
    }
}
