use std::path::PathBuf;
use std::process::ExitCode;

use acerlab::experiment::{run, sweep, ExperimentConfig};
use acerlab::verify::{run_suite, Suite};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "acerlab", version, about = "Train and verify actor-critic agents with experience replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write its learning curve, summary and checkpoint.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides both the config seed and ACERLAB_SEED.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run an oracle suite: operators, trust_region, gradients, identities or all.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Random search over learning rate and trust-region size.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 30)]
        trials: usize,
    },
}

fn load(path: &PathBuf, seed: Option<u64>, workers: Option<usize>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.apply_env_seed()?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(workers) = workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, seed, workers } => {
            let cfg = load(&config, seed, workers)?;
            let summary = run(&cfg)?;
            println!(
                "{} {} seed {}: {} master steps, {} updates, {} episodes, final return {:.4} +/- {:.4}",
                summary.env_name,
                summary.algo,
                summary.seed,
                summary.master_steps,
                summary.updates,
                summary.episodes,
                summary.final_eval_mean,
                summary.final_eval_std
            );
            println!("wrote {}", cfg.output_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { suite } => {
            let suite: Suite = suite.parse()?;
            let checks = run_suite(suite)?;
            for check in &checks {
                println!("{check}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} of {} checks passed", checks.len() - failed, checks.len());
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Sweep { config, trials } => {
            let cfg = load(&config, None, None)?;
            let results = sweep(&cfg, trials)?;
            for r in &results {
                println!("trial {:>2}: lr {:.3e} delta {:.3} -> {:.4} ({})", r.trial, r.lr, r.delta, r.final_eval_mean, r.status);
            }
            println!("wrote {}", cfg.output_path.join("sweep.csv").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
