//! `mstcn` command-line driver.
//!
//! Exit codes: 0 success, 1 other I/O failure, 2 usage error or missing
//! input, 3 malformed file (CSV, JSON, checkpoint bytes, sample rate,
//! overlapping events), 4 contract violation (schema, shapes, channels,
//! invalid spec), 5 training diverged, 6 gradient check failed.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "mstcn", version, about = "Multi-stage TCN for sample-wise IMU activity segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// Dataset directory (schema.json plus <subject>/<session>.{signal,labels}.csv).
    #[arg(long, env = "MSTCN_DATA_DIR")]
    pub data: PathBuf,
    /// Expected sample rate of every signal file.
    #[arg(long, default_value_t = 100.0)]
    pub rate: f64,
}

#[derive(Args, Clone)]
pub struct CountArgs {
    /// Predicted runs shorter than this many samples are not counted.
    #[arg(long, default_value_t = mstcn::metrics::DEFAULT_MIN_DURATION)]
    pub min_duration: usize,
    /// Class names forming the "all jumps" total (comma separated); defaults
    /// to every non-null class.
    #[arg(long, value_delimiter = ',')]
    pub jumps: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on every subject except the held-out ones.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path; the metrics log and run manifest are written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Subjects excluded from training (comma separated).
        #[arg(long, value_delimiter = ',')]
        held_out: Vec<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Predict whole held-out recordings and report count agreement.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        held_out: Vec<String>,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        count: CountArgs,
        /// Spread of predicted counts around the mean difference instead of the
        /// SD of paired differences.
        #[arg(long)]
        predicted_spread_sd: bool,
    },
    /// Train and evaluate models with 1..=S stages under identical seeds.
    SweepStages {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        config: PathBuf,
        /// Inclusive range `a..b` or a comma-separated list.
        #[arg(long, default_value = "1..5")]
        stages: String,
        /// Folds to run; defaults to every subject in turn.
        #[arg(long, value_delimiter = ',')]
        held_out: Vec<String>,
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        count: CountArgs,
        /// Parallel training jobs.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Finite-difference check of the full model and loss gradient.
    Gradcheck {
        /// Model config JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        slice_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Check a seeded random subset of this many coordinates when the
        /// model has more parameters.
        #[arg(long, default_value_t = 10_000)]
        max_coords: usize,
        #[arg(long, value_enum, default_value = "elementwise")]
        ce_norm: commands::NormArg,
    },
    /// Print the number of trainable scalars of a model config.
    Paramcount {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Count events in one recording with a trained checkpoint.
    Count {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        series: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, default_value_t = 100.0)]
        rate: f64,
        #[command(flatten)]
        count: CountArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, out, seed } => commands::synth(&spec, &out, seed),
        Command::Train { data, config, out, held_out, epochs, seed, lr } => {
            commands::train(&data, &config, &out, &held_out, commands::TrainOverrides { epochs, seed, lr })
        }
        Command::Eval { data, ckpt, held_out, report, count, predicted_spread_sd } => {
            commands::eval(&data, &ckpt, &held_out, &report, &count, predicted_spread_sd)
        }
        Command::SweepStages { data, config, stages, held_out, report, count, workers } => {
            commands::sweep_stages(&data, &config, &stages, &held_out, &report, &count, workers)
        }
        Command::Gradcheck { config, slice_samples, seed, h, tol, max_coords, ce_norm } => {
            commands::gradcheck(config.as_deref(), slice_samples, seed, h, tol, max_coords, ce_norm)
        }
        Command::Paramcount { config } => commands::paramcount(config.as_deref()),
        Command::Count { ckpt, series, schema, rate, count } => commands::count(&ckpt, &series, &schema, rate, &count),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
