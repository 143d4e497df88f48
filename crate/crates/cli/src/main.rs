//! `projrl`: experiment driver for the projection-layer control
//! toolkit. Exit codes: 0 success, 1 runtime failure, 2 bad
//! configuration or arguments.

mod commands;
mod config;

use anyhow::Result;
use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "projrl", version, about = "constraint-enforcing policy experiments")]
struct Cli {
    /// TOML configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override: "building" or "inverter".
    #[arg(long, global = true)]
    task: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    controller: Option<String>,
    #[arg(long, global = true)]
    out_dir: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Closed-loop run; writes a metrics CSV and a summary JSON.
    Run {
        /// Comma-separated seed list; each seed gets its own outputs.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Fit the task model and report its error.
    Sysid,
    /// Imitation pretraining of the building policy; writes a checkpoint.
    Pretrain,
    /// Generate a synthetic trace CSV for the configured task.
    Synth,
    /// Finite-difference validation of projection gradients.
    Gradcheck {
        /// Number of random projection checks.
        #[arg(long, default_value_t = 100)]
        checks: usize,
    },
    /// Print the effective configuration and its hash.
    Config {
        #[arg(long)]
        print_defaults: bool,
    },
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(t) = &cli.task {
        cfg.task = t.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.steps {
        cfg.steps = s;
    }
    if let Some(c) = &cli.controller {
        cfg.controller = c.clone();
    }
    if let Some(d) = &cli.out_dir {
        cfg.out_dir = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match effective_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.cmd {
        Cmd::Run { seeds } => {
            let seeds = seeds.clone().unwrap_or_else(|| vec![cfg.seed]);
            commands::cmd_run(&cfg, &seeds)
        }
        Cmd::Sysid => commands::cmd_sysid(&cfg),
        Cmd::Pretrain => commands::cmd_pretrain(&cfg),
        Cmd::Synth => commands::cmd_synth(&cfg),
        Cmd::Gradcheck { checks } => commands::cmd_gradcheck(&cfg, *checks),
        Cmd::Config { print_defaults } => commands::cmd_config(&cfg, *print_defaults),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
