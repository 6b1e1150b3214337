mod config;
mod evaluate;
mod inspect;
mod output;
mod report;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{Mode, Overrides, RunConfig};

/// Preventive energy management: power flow, failure scenarios, PPO
/// training and LP baselines.
#[derive(Debug, Parser)]
#[command(name = "ems", version)]
struct Cli {
    /// Bundled case name (mvdc12, ieee30, toy3) or case file path.
    #[arg(long, global = true)]
    case: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scenario probability threshold.
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// CVaR confidence level.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a case file against every model invariant.
    Validate,
    /// Solve one power flow and write bus and line CSVs.
    Powerflow {
        /// CSV with columns bus,p_mw[,q_mvar]; defaults to the nominal dispatch.
        #[arg(long)]
        injections: Option<PathBuf>,
        /// Interval used for the nominal dispatch.
        #[arg(long, default_value_t = 0)]
        hour: usize,
    },
    /// Enumerate failure scenarios above the threshold.
    Scenarios,
    /// Train a PPO policy, writing checkpoints and the training log.
    Train {
        /// Overrides the configured total episode count.
        #[arg(long)]
        episodes: Option<u64>,
        /// Continue from the policy checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Roll out one method on every retained scenario.
    Evaluate {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Policy checkpoint; defaults to <out>/policy.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run base EMS, DC-LP and RL on the same scenario set.
    Benchmark {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Assemble report.md from the CSVs in the output directory.
    Report {
        /// Directory to read; defaults to --out.
        dir: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    let flags = Overrides {
        case: cli.case.clone(),
        out: cli.out.clone(),
        seed: cli.seed,
        threshold: cli.threshold,
        alpha: cli.alpha,
    };
    if let Command::Validate = cli.command {
        let case = match (&cli.case, &cli.config) {
            (Some(c), _) => c.clone(),
            (None, path) => RunConfig::load(path.as_deref(), &flags)?.case,
        };
        return Ok(inspect::validate(&case));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &flags)?;
    match cli.command {
        Command::Validate => unreachable!(),
        Command::Powerflow { injections, hour } => inspect::powerflow(&cfg, injections.as_deref(), hour),
        Command::Scenarios => inspect::scenarios(&cfg).map(|_| ExitCode::SUCCESS),
        Command::Train { episodes, resume } => train::train(&cfg, episodes, resume).map(|_| ExitCode::SUCCESS),
        Command::Evaluate { mode, checkpoint } => {
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            evaluate::evaluate_cmd(&cfg).map(|_| ExitCode::SUCCESS)
        }
        Command::Benchmark { checkpoint } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint;
            }
            let failures = evaluate::benchmark(&cfg)?;
            Ok(if failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Report { dir } => {
            let dir = dir.unwrap_or(cfg.out);
            match report::report(&dir)? {
                Ok(()) => {
                    println!("wrote {}", dir.join("report.md").display());
                    Ok(ExitCode::SUCCESS)
                }
                Err(missing) => {
                    for m in missing {
                        eprintln!("missing input: {}", dir.join(m).display());
                    }
                    Ok(ExitCode::from(1))
                }
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
