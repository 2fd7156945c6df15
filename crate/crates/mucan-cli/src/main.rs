//! `mucan` command-line entry point.
//!
//! Exit codes: 0 success, 2 usage error, 3 missing/unreadable weights,
//! 4 bad input image, 5 bench equivalence failure, 1 any other failure.

mod bench;
mod gradcheck_cmd;
mod images;
mod knnflow_cmd;
mod metrics_cmd;
mod sr;
mod train_toy_cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "mucan", version, about = "Correspondence-aggregation video super-resolution kernels")]
struct Cli {
    /// Worker-thread cap (falls back to MUCAN_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchKernel {
    /// Top-K correlation volume.
    Corr,
    /// Cross-scale nonlocal nearest-neighbor search.
    Nnsearch,
}

#[derive(Subcommand)]
enum Command {
    /// Upscale a directory of frames x4 with a sliding temporal window.
    Sr {
        /// Config file (`key = value`); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// MUCW weights file.
        #[arg(long)]
        weights: PathBuf,
        /// Directory holding frame_%04d.png inputs.
        #[arg(long)]
        input: PathBuf,
        /// Output directory for out_%04d.png.
        #[arg(long)]
        output: PathBuf,
    },
    /// Overfit the network on one synthetic clip and report the loss trace.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        iters: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// LR frame extent (frames are size x size).
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Where to write the trained MUCW weights.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to write the loss trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Verify analytic gradients against central differences (64-bit mode).
    Gradcheck {
        /// Seeds per op; the worst result is reported.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Best-of-K patch-match flow study on synthetic translated textures.
    Knnflow {
        /// Comma-separated K values.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 6])]
        k: Vec<usize>,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        disp: usize,
        #[arg(long, default_value_t = 3)]
        patch: usize,
        #[arg(long, default_value_t = 48)]
        size: usize,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time a naive oracle against its optimized kernel (equivalence is
    /// asserted first).
    Bench {
        #[arg(long, value_enum)]
        kernel: BenchKernel,
        /// Map size as HxW.
        #[arg(long, default_value = "64x64")]
        size: String,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        disp: usize,
        #[arg(long, default_value_t = 4)]
        top_k: usize,
        #[arg(long, default_value_t = 3)]
        patch: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Per-frame and mean PSNR/SSIM between two directories of PNGs.
    Metrics {
        /// Reference frame directory.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Test frame directory.
        #[arg(long)]
        test: PathBuf,
        /// Evaluate on the luma plane instead of RGB.
        #[arg(long)]
        luma: bool,
    },
}

fn resolve_threads(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("MUCAN_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = resolve_threads(cli.threads) {
        if n > 0 {
            if let Err(e) = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
            {
                eprintln!("mucan: failed to size the thread pool: {e}");
                return ExitCode::from(1);
            }
        }
    }
    let code = match cli.command {
        Command::Sr {
            config,
            weights,
            input,
            output,
        } => sr::run(config.as_deref(), &weights, &input, &output),
        Command::TrainToy {
            config,
            iters,
            seed,
            size,
            out,
            trace,
        } => train_toy_cmd::run(config.as_deref(), iters, seed, size, out.as_deref(), trace.as_deref()),
        Command::Gradcheck { seeds, seed } => gradcheck_cmd::run(seeds, seed),
        Command::Knnflow {
            k,
            noise,
            trials,
            seed,
            disp,
            patch,
            size,
            csv,
        } => knnflow_cmd::run(&k, noise, trials, seed, disp, patch, size, csv.as_deref()),
        Command::Bench {
            kernel,
            size,
            channels,
            disp,
            top_k,
            patch,
            seed,
        } => bench::run(kernel, &size, channels, disp, top_k, patch, seed),
        Command::Metrics {
            reference,
            test,
            luma,
        } => metrics_cmd::run(&reference, &test, luma),
    };
    ExitCode::from(code)
}
