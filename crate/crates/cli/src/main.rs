use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Prototype-guided multi-class anomaly detection.
#[derive(Parser, Debug)]
#[command(name = "futureg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a detector and write a checkpoint plus loss curves.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Score the held-out split of a checkpoint's dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["test"])]
        split: String,
        /// Per-sample metrics CSV.
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        /// Write one patch-error grid per test sample into this directory.
        #[arg(long)]
        error_maps: Option<PathBuf>,
    },
    /// Score a single grayscale image (PNG or PGM).
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Patch-error grid CSV.
        #[arg(long)]
        error_map: Option<PathBuf>,
    },
    /// Compare anomaly densities under single-class and multi-class models.
    BoundaryStats(commands::BoundaryArgs),
    /// Histogram entropy of dataset or dense-noise images.
    Entropy {
        /// Dataset configuration; the built-in synthetic set when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test", value_parser = ["train", "test"])]
        split: String,
        /// Score this many uniform-noise images instead of the dataset.
        #[arg(long)]
        noise: Option<usize>,
        #[arg(long, default_value_t = 256)]
        bins: usize,
        #[arg(long, default_value = "entropy.csv")]
        out: PathBuf,
    },
    /// Train and evaluate every setting along one ablation axis.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["fpm", "cfg", "k"])]
        axis: String,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
    },
    /// Compare autodiff gradients with central finite differences.
    Gradcheck {
        /// Single module to check; all modules when absent.
        #[arg(long)]
        module: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
