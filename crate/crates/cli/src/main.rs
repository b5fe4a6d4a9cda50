//! `vox4d` — training, evaluation and inspection of time-distributed
//! volumetric sequence classifiers.
//!
//! Subcommands: `train`, `evaluate`, `gradcheck`, `generate`,
//! `shape-trace`. Exit codes are a fixed contract: 0 success, 2
//! configuration error, 3 data error, 4 every training repeat aborted on a
//! non-finite loss, 5 gradient check failure. With `--threads 1` every
//! command reproduces its stdout and artifacts bitwise.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::CliError;

const EXIT_NOTE: &str = "Exit codes: 0 success, 2 configuration error, 3 data error, \
4 all training repeats aborted, 5 gradient check failure.\n\
VOX4D_OUTPUT_DIR overrides the configured output_dir (for CI temp dirs).";

#[derive(Parser)]
#[command(
    name = "vox4d",
    version,
    about = "Time-distributed volumetric sequence classifiers",
    after_help = EXIT_NOTE
)]
struct Cli {
    /// Cap the worker thread count; 1 guarantees bitwise-reproducible
    /// output and artifacts.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier from a JSON run configuration.
    Train {
        /// Run configuration file (model + train + data + output_dir).
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
    },
    /// Score a saved checkpoint on a split of the configured dataset.
    Evaluate {
        /// Run configuration file; supplies the data source and split.
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Checkpoint directory holding model.json and model.bin.
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Which sample set to score.
        #[arg(long, default_value = "val", value_parser = ["val", "train", "all"])]
        split: String,
    },
    /// Finite-difference check of every layer gradient on a toy-scaled
    /// model in double precision.
    Gradcheck {
        /// Architecture: sm-gru, sm-lstm, mm-gru or mm-lstm.
        kind: String,
        /// Seed for both the toy model weights and the probe batch.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Scale the analytic gradient of matching parameters by 1.5, to
        /// prove the check catches a wrong backward rule.
        #[arg(long, hide = true, value_name = "SUBSTR")]
        inject_fault: Option<String>,
    },
    /// Generate a balanced labeled phantom dataset with a JSON manifest.
    Generate {
        /// Number of samples; labels alternate 0, 1, 0, 1, ...
        #[arg(long)]
        count: usize,
        /// Class separation in [0, 1]; 0 is the null-signal control.
        #[arg(long, default_value_t = vox4d_core::data::DEFAULT_SEPARATION)]
        delta: f64,
        /// Base seed; sample i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the tensor dumps and manifest.json.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Print the symbolic per-layer output shapes of an architecture as
    /// text and JSON.
    ShapeTrace {
        /// Architecture: sm-gru, sm-lstm, mm-gru or mm-lstm.
        kind: String,
        /// Structural-volume resolution (multi-modal only): 64 or 32.
        #[arg(long, default_value_t = 64)]
        mri: usize,
    },
}

/// Keep large tensor buffers on the main heap arena instead of bouncing
/// them through mmap/munmap: the kernels allocate and free multi-megabyte
/// intermediates constantly, and the default glibc thresholds spend a
/// measurable share of wall time on page faults.
#[cfg(target_env = "gnu")]
fn tune_allocator() {
    const ARENA_BYTES: libc::c_int = 1 << 30;
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, ARENA_BYTES);
        libc::mallopt(libc::M_TRIM_THRESHOLD, ARENA_BYTES);
    }
}

#[cfg(not(target_env = "gnu"))]
fn tune_allocator() {}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot configure thread pool: {e}")))?;
    }
    let single_threaded = cli.threads == Some(1);
    match cli.command {
        Command::Train { config } => commands::cmd_train(&config, single_threaded),
        Command::Evaluate {
            config,
            checkpoint,
            split,
        } => commands::cmd_evaluate(&config, &checkpoint, &split),
        Command::Gradcheck {
            kind,
            seed,
            inject_fault,
        } => commands::cmd_gradcheck(&kind, seed, inject_fault.as_deref()),
        Command::Generate {
            count,
            delta,
            seed,
            out,
        } => commands::cmd_generate(count, delta, seed, &out),
        Command::ShapeTrace { kind, mri } => commands::cmd_shape_trace(&kind, mri),
    }
}

fn main() -> ExitCode {
    tune_allocator();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
