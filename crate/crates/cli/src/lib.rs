//! Library half of the `pushforge` binary, exposed so the stages can be
//! driven from tests.

pub mod config;
pub mod stages;

use std::path::PathBuf;

use clap::Parser;

pub use config::{load_config, RunConfig};
pub use stages::{run_stage, Stage};

#[derive(Debug, Parser)]
#[command(name = "pushforge", version, about = "Push-notification generation pipeline")]
pub struct Cli {
    /// Pipeline stage to run.
    #[arg(value_enum)]
    pub stage: Stage,
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `paths.out_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Global seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dotted-path override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

/// Loads the config for `cli` and runs its stage, returning the summary lines.
pub fn execute(cli: &Cli) -> anyhow::Result<Vec<serde_json::Value>> {
    let mut cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    run_stage(cli.stage, &cfg)
}
