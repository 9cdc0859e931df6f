//! Command-line driver for kNN-UE experiments.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use knnue::calibration::Method;
use knnue::IndexKind;

pub use config::{Overrides, RunConfig};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "knnue", version, about = "kNN-based uncertainty estimation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic datastore and record splits
    Synth(CommonArgs),
    /// Build an index over the datastore and save it
    BuildIndex(CommonArgs),
    /// Fit a calibrator on the dev split
    Fit(CommonArgs),
    /// Score the test splits and write metric reports
    Eval(CommonArgs),
    /// Sweep K or an index parameter and write one report per point
    Sweep(CommonArgs),
    /// Compare approximate neighbor sets against a reference index
    Coverage(CommonArgs),
    /// Time the retrieval pass for flat and configured indexes
    Bench(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON config (for `synth`, the generator settings)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Index kind: flat, ivf, pq or composed
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<IndexKind>,
    #[arg(long)]
    pub nsub: Option<usize>,
    #[arg(long)]
    pub nprobe: Option<usize>,
    #[arg(long)]
    pub dpca: Option<usize>,
    /// Recompute exact distances for approximate candidates
    #[arg(long)]
    pub recompute: bool,
    /// Fitted parameters file for `eval`
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Output directory, or the output file for `build-index` and `fit`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

fn parse_kind(s: &str) -> Result<IndexKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown index kind {s:?} (expected flat, ivf, pq or composed)"))
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            method: self.method,
            k: self.k,
            kind: self.kind,
            n_sub: self.nsub,
            n_probe: self.nprobe,
            d_pca: self.dpca,
            recompute: self.recompute,
            params: self.params.clone(),
        }
    }

    /// Loads the run config, treating `--out` as the output directory.
    fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides())?;
        if let Some(out) = &self.out {
            cfg.paths.out_dir = Some(out.clone());
        }
        Ok(cfg)
    }
}

/// Runs one parsed command, printing its JSON result on stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    use commands::*;
    match cli.command {
        Command::Synth(a) => {
            let out = a.out.clone().unwrap_or_else(|| PathBuf::from("."));
            emit(&cmd_synth(a.config.as_deref(), &out, a.seed)?)
        }
        Command::BuildIndex(a) => {
            let cfg = RunConfig::load(a.config.as_deref(), &a.overrides())?;
            emit(&cmd_build_index(&cfg, a.out.as_deref())?)
        }
        Command::Fit(a) => {
            let cfg = RunConfig::load(a.config.as_deref(), &a.overrides())?;
            match cmd_fit(&cfg, a.out.as_deref())? {
                Some((path, fitted)) => {
                    eprintln!("wrote {}", path.display());
                    emit(&fitted)
                }
                None => {
                    eprintln!("sr (softmax response) has no parameters to fit; nothing written");
                    Ok(())
                }
            }
        }
        Command::Eval(a) => emit(&cmd_eval(&a.run_config()?)?),
        Command::Sweep(a) => emit(&cmd_sweep(&a.run_config()?)?),
        Command::Coverage(a) => emit(&cmd_coverage(&a.run_config()?)?),
        Command::Bench(a) => emit(&cmd_bench(&a.run_config()?)?),
    }
}
