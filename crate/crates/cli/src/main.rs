use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Learned trajectory similarity: data preparation, ground truth, training,
/// embedding and retrieval evaluation.
#[derive(Debug, Parser)]
#[command(name = "trajsim", version)]
struct Cli {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file, or output directory for `train` and `eval`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Removes consecutive duplicates and applies length bounds.
    Preprocess {
        input: PathBuf,
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Writes random-walk trajectories in lon/lat.
    Synth {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 20)]
        min_len: usize,
        #[arg(long, default_value_t = 50)]
        max_len: usize,
        /// Local box in meters: `x_min,y_min,x_max,y_max`.
        #[arg(long, default_value = "-5000,-5000,5000,5000")]
        bbox: String,
        /// Box centre as `lon,lat`.
        #[arg(long, default_value = "-8.61,41.15", allow_hyphen_values = true)]
        center: String,
    },
    /// Computes the pairwise ground-truth similarity matrix.
    Gt {
        dataset: PathBuf,
        /// dtw, dfd or edwp (defaults to the configured measure).
        #[arg(long)]
        measure: Option<String>,
    },
    /// Trains an encoder and evaluates it on the test split.
    Train {
        /// Dataset (overrides the configured one).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Dumps eval-mode embeddings.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        dataset: PathBuf,
    },
    /// Scores kNN retrieval on a dataset against its own ground truth.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Fraction of points removed from each query.
        #[arg(long, default_value_t = 0.0)]
        mask: f64,
        /// Maximum random displacement of query points, in meters.
        #[arg(long, default_value_t = 0.0)]
        shift: f64,
        /// Use the ground truth as predictions (pipeline self-test).
        #[arg(long)]
        oracle: bool,
    },
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
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
