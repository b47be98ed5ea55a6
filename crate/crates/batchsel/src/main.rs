//! Experiment runner CLI: parses a config file, executes the configured
//! training runs (optionally repeated over consecutive seeds) and writes
//! per-seed and median CSV convergence logs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use batchsel::config::{self, DataSource};
use batchsel::experiment;

/// Benchmark runner for loss-ranked batch selection.
#[derive(Parser, Debug)]
#[command(name = "batchsel", version, about)]
struct Args {
    /// Experiment config file (key = value lines with [run <name>] sections).
    #[arg(long)]
    config: PathBuf,

    /// Output directory for CSV logs (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Directory holding the four standard MNIST IDX files
    /// (train-images-idx3-ubyte, train-labels-idx1-ubyte,
    /// t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte); selects the MNIST
    /// dataset.
    #[arg(long, conflicts_with = "synthetic")]
    mnist_dir: Option<PathBuf>,

    /// Use the synthetic dataset regardless of what the config selects.
    #[arg(long)]
    synthetic: bool,

    /// Number of repeats per run, with seeds seed, seed+1, ...
    #[arg(long)]
    repeats: Option<usize>,

    /// Base seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();

    let mut spec = match config::parse_config(&args.config) {
        Ok(spec) => spec,
        Err(e) => {
            eprintln!("batchsel: config error: {e}");
            return ExitCode::from(2);
        }
    };

    if let Some(out) = args.out {
        spec.out_dir = out;
    }
    if let Some(repeats) = args.repeats {
        spec.repeats = repeats.max(1);
    }
    if let Some(seed) = args.seed {
        spec.base_seed = seed;
    }
    if let Some(dir) = args.mnist_dir {
        spec.data = match spec.data {
            DataSource::Mnist {
                n_train, n_val, ..
            } => DataSource::Mnist {
                dir,
                n_train,
                n_val,
            },
            _ => DataSource::mnist_defaults(dir),
        };
    } else if args.synthetic {
        if !matches!(spec.data, DataSource::Synthetic { .. }) {
            spec.data = DataSource::synthetic_defaults();
        }
    }

    match experiment::run_experiment(&spec) {
        Ok(()) => {
            println!(
                "batchsel: wrote {} CSV files to {}",
                experiment::expected_outputs(&spec).len(),
                spec.out_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("batchsel: {e}");
            ExitCode::FAILURE
        }
    }
}
