use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "switchid", version, about = "Identify and observe a pendulum with stick-slip friction")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Generate training and held-out experiments.
    Simulate(Common),
    /// Cluster transitions into sticking and sliding.
    Cluster(Common),
    /// Learn the switching surface from the cluster labels.
    Classify(Common),
    /// Fit one sparse model per class.
    Identify(Common),
    /// Compare a free rollout of the model with the simulator.
    Validate(Common),
    /// Run the moving horizon observer on a drop-down.
    Estimate(Common),
    /// All of the above, in order.
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Top-level seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = match cli.verb {
        Verb::Simulate(a) => ("simulate", a),
        Verb::Cluster(a) => ("cluster", a),
        Verb::Classify(a) => ("classify", a),
        Verb::Identify(a) => ("identify", a),
        Verb::Validate(a) => ("validate", a),
        Verb::Estimate(a) => ("estimate", a),
        Verb::Pipeline(a) => ("pipeline", a),
    };
    let result = switchid::load_config(&args.config, args.out, args.seed)
        .and_then(|cfg| switchid::run_verb(name, &cfg, &cfg.out_dir));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("switchid {name}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
