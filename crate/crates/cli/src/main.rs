mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seqvla_core::config::RunConfig;

/// Data generation, training, rollout and analysis for completion-aware
/// sequencing policies.
#[derive(Parser, Debug)]
#[command(name = "seqvla", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration (JSON). Defaults to the built-in config for --task.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Task family used when no config file is given.
    #[arg(long, global = true, default_value = "salad")]
    task: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the effective run configuration.
    ShowConfig,
    /// Generate the subtask dataset (and optionally the long-horizon one).
    GenData {
        #[arg(long)]
        plan: Option<String>,
        /// Demonstrations per distinct subtask.
        #[arg(long)]
        demos: Option<usize>,
        /// Also generate the task-level dataset used by the baseline.
        #[arg(long)]
        long_horizon: bool,
    },
    /// Train one strategy, or all of them into a bundle.
    Train {
        /// J, JF, S, SF, baseline or all.
        #[arg(long)]
        strategy: Option<String>,
        /// Training seed for a single strategy.
        #[arg(long, conflicts_with = "seeds")]
        seed: Option<u64>,
        /// Train `all` over the first N configured seeds (0..N if more are asked for).
        #[arg(long)]
        seeds: Option<usize>,
        /// Continue an interrupted single-strategy run from its checkpoint.
        #[arg(long, conflicts_with_all = ["strategy", "seed", "seeds"])]
        resume: Option<PathBuf>,
        /// Stop after this many epochs in this invocation (checkpoint stays resumable).
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Roll a checkpoint out over fresh episodes.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        plan: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed_base: Option<u64>,
    },
    /// Compute the metrics report over a training bundle.
    Analyze {
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Also run this many evaluation rollouts per bundle entry.
        #[arg(long, default_value_t = 0)]
        episodes: usize,
    },
}

/// Exit status 1: bad usage or configuration. Exit status 2: runtime failure.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

pub fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(anyhow::anyhow!("{msg}"))
}

fn load_config(g: &Global) -> Result<RunConfig, Failure> {
    let cfg = match &g.config {
        Some(path) => RunConfig::load(path).map_err(|e| usage(e))?,
        None => RunConfig::for_task(&g.task).map_err(|e| usage(e))?,
    };
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::ShowConfig => {
            print!("{}", cfg.to_pretty_json());
            println!("config_hash {}", cfg.hash());
            Ok(())
        }
        Command::GenData { plan, demos, long_horizon } => {
            commands::gen_data(commands::with_overrides(cfg, plan.as_deref(), demos)?, long_horizon)
        }
        Command::Train { strategy, seed, seeds, resume, max_epochs } => match resume {
            Some(path) => commands::resume(&cfg, &path, max_epochs),
            None => commands::train(&cfg, strategy.as_deref(), seed, seeds, max_epochs),
        },
        Command::Rollout { checkpoint, plan, episodes, seed_base } => {
            let cfg = commands::with_overrides(cfg, plan.as_deref(), None)?;
            commands::rollout(&cfg, &checkpoint, episodes, seed_base)
        }
        Command::Analyze { bundle, episodes } => commands::analyze(&cfg, bundle, episodes),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
