//! Command-line interface: one command per process, deterministic artifacts
//! for a fixed config + seed.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use gstree::analysis::{FeatVizConfig, VizInit};
use gstree::error::Error;

pub mod commands;
pub mod config;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Parser)]
#[command(
    name = "gstree",
    about = "Train, grow and inspect generalized soft trees",
    version
)]
struct Cli {
    /// Worker threads; this build executes single-threaded for bit-exact
    /// reproducibility, values above 1 are accepted and run identically.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// IDX image file.
    #[arg(long)]
    data_images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    data_labels: Option<PathBuf>,
    /// CSV data file (header row required).
    #[arg(long)]
    data_csv: Option<PathBuf>,
    /// Target column name for CSV data.
    #[arg(long)]
    target: Option<String>,
}

impl DataArgs {
    fn as_eval_args(&self) -> commands::EvalDataArgs<'_> {
        commands::EvalDataArgs {
            images: self.data_images.as_deref(),
            labels: self.data_labels.as_deref(),
            csv: self.data_csv.as_deref(),
            target: self.target.as_deref(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a full tree from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Grow an existing model with the incremental splitting loop.
    Grow {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Topology summary, coefficient images, and leaf-concentration report.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Top-k leaves for the concentration report.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Weight threshold for the concentration report.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Optimize inputs that maximize and minimize one node's activation.
    Featviz {
        #[arg(long)]
        model: PathBuf,
        /// Inner node id.
        #[arg(long)]
        node: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        iterations: usize,
        #[arg(long, default_value_t = 0.1)]
        step_size: f64,
        #[arg(long, default_value_t = 1e-4)]
        lambda_l1: f64,
        #[arg(long, default_value_t = 1e-3)]
        lambda_l2: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Start from zeros instead of seeded noise.
        #[arg(long, default_value_t = false)]
        zero_init: bool,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Io(_) | Error::Json(_) | Error::UnsupportedVersion { .. } => {
            EXIT_DATA
        }
        Error::Shape(_) => EXIT_DATA,
        Error::InvalidValue(_) | Error::Numeric(_) => EXIT_NUMERIC,
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    if cli.threads == 0 {
        eprintln!("error: --threads must be >= 1");
        return EXIT_CONFIG;
    }
    if cli.threads > 1 {
        eprintln!(
            "note: --threads {} requested; executing single-threaded for reproducibility",
            cli.threads
        );
    }
    let result = match &cli.command {
        Command::Train { config, out, seed } => commands::cmd_train(config, out, *seed),
        Command::Grow {
            config,
            model,
            out,
            seed,
        } => commands::cmd_grow(config, model, out, *seed),
        Command::Eval { model, data, out } => {
            commands::cmd_eval(model, &data.as_eval_args(), out)
        }
        Command::Inspect {
            model,
            data,
            out,
            k,
            alpha,
        } => commands::cmd_inspect(model, &data.as_eval_args(), out, *k, *alpha),
        Command::Featviz {
            model,
            node,
            out,
            iterations,
            step_size,
            lambda_l1,
            lambda_l2,
            seed,
            zero_init,
        } => {
            let cfg = FeatVizConfig {
                iterations: *iterations,
                step_size: *step_size,
                lambda_l1: *lambda_l1,
                lambda_l2: *lambda_l2,
                seed: *seed,
                init: if *zero_init {
                    VizInit::Zeros
                } else {
                    VizInit::SeededNoise
                },
                ..FeatVizConfig::default()
            };
            commands::cmd_featviz(model, *node, out, &cfg)
        }
        Command::Gradcheck { config, tolerance } => {
            match commands::cmd_gradcheck(config.as_deref(), *tolerance) {
                Ok(true) => return EXIT_OK,
                Ok(false) => return EXIT_NUMERIC,
                Err(e) => Err(e),
            }
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
