//! Command-line front end of the identification pipeline.
//!
//! Every verb works on one output directory: `simulate` writes the dataset,
//! and each later stage reads the artifacts of its predecessors.

pub mod config;
pub mod error;
pub mod io;
pub mod stages;

use std::path::{Path, PathBuf};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Runs `verb` with `cfg`, writing into `out`.
pub fn run_verb(verb: &str, cfg: &RunConfig, out: &Path) -> CliResult<()> {
    io::ensure_dir(out)?;
    match verb {
        "simulate" => stages::simulate(cfg, out).map(drop),
        "cluster" => stages::cluster(cfg, out).map(drop),
        "classify" => stages::classify(cfg, out).map(drop),
        "identify" => stages::identify(cfg, out).map(drop),
        "validate" => stages::validate(cfg, out).map(drop),
        "estimate" => stages::estimate(cfg, out).map(drop),
        "pipeline" => stages::pipeline(cfg, out).map(drop),
        other => Err(CliError::Config(format!("unknown verb {other:?}"))),
    }
}

/// Loads the config and applies command-line overrides.
pub fn load_config(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}
