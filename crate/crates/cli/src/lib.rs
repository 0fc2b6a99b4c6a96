//! Command-line front end for GRAD: configuration parsing and dispatch.

pub mod config;
pub mod dispatch;

use std::path::PathBuf;

use clap::Parser;

pub use config::{apply_override, parse_config, Command, ConfigError, Overrides, RunConfig};
pub use dispatch::{dispatch, load_agent, Exit};

#[derive(Debug, Parser)]
#[command(name = "grad", about = "Robust RL against temporally-coupled adversaries via double oracle")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set engine.max_epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Parses, validates and dispatches; returns the process exit status.
pub fn main_with(cli: Cli) -> Exit {
    let ov = Overrides {
        command: Some(cli.command),
        seed: cli.seed,
        out: cli.out,
        set: cli.set,
    };
    let cfg = match parse_config(cli.config.as_deref(), &ov) {
        Ok((cfg, warnings)) => {
            for w in warnings {
                eprintln!("warning: {w}");
            }
            cfg
        }
        Err(e) => {
            eprintln!("config error: {e}");
            return Exit::ConfigError;
        }
    };
    match dispatch(&cfg) {
        Ok(exit) => exit,
        Err(e) => {
            eprintln!("error: {e:#}");
            Exit::RuntimeError
        }
    }
}
