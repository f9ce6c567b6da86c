//! `fastc` command-line front end.

mod commands;
mod config;
mod palette;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fastc::model::FusionStrategy;

use crate::commands::EvalArgs;
use crate::config::{RunConfig, ENV_THREADS};

#[derive(Parser, Debug)]
#[command(name = "fastc", version, about = "LIDAR traversability mapping with multi-frame fusion")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labelled sequence with analytic ground truth.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Build ground-truth maps for a labelled sequence.
    GenData {
        #[arg(long, value_name = "DIR")]
        sequence: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Aggregation preset: on-road or off-road.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Stage 1: single-frame training of the pillar encoder and network.
    Train,
    /// Stage 2: add the fusion module to a stage-1 checkpoint.
    TrainFusion {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long)]
        strategy: Option<FusionStrategy>,
    },
    /// Per-class IoU, mIoU and mAcc of a checkpoint or of saved maps.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Evaluation data; defaults to data.test.
        #[arg(long, value_name = "DIR")]
        data: Vec<PathBuf>,
        /// Directory of predicted maps, paired by file name with --gt.
        #[arg(long, value_name = "DIR", requires = "gt", conflicts_with = "checkpoint")]
        pred: Option<PathBuf>,
        #[arg(long, value_name = "DIR", requires = "pred")]
        gt: Option<PathBuf>,
        #[command(flatten)]
        region: RegionArg,
    },
    /// Compare pre-, in- and post-fusion checkpoints on one split.
    Ablate {
        #[arg(long = "pre", value_name = "PATH")]
        pre: PathBuf,
        #[arg(long = "in", value_name = "PATH")]
        inside: PathBuf,
        #[arg(long = "post", value_name = "PATH")]
        post: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Vec<PathBuf>,
        #[command(flatten)]
        region: RegionArg,
        /// Accept checkpoints whose strategy differs from their slot.
        #[arg(long)]
        control: bool,
    },
    /// Predict a map for one sample of scans.
    Infer {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Scan files, current frame first; one per fused frame.
        #[arg(long, value_name = "PATH", required = true)]
        scan: Vec<PathBuf>,
        /// Pose file with one line per scan; identity poses when omitted.
        #[arg(long, value_name = "PATH")]
        poses: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Also render the map as a PNG.
        #[arg(long, value_name = "PATH")]
        png: Option<PathBuf>,
    },
    /// Measure single-sample inference speed.
    Time {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Scan to time on; a synthetic scan when omitted.
        #[arg(long, value_name = "PATH")]
        scan: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
    },
    /// Render a map as a PNG, or decode a rendered PNG back to a map.
    Viz {
        #[arg(long, value_name = "PATH")]
        map: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Treat --map as a rendered PNG and write the decoded map.
        #[arg(long)]
        decode: bool,
    },
}

#[derive(Args, Debug)]
struct RegionArg {
    /// Cells to score: all, beyond:<metres> or within:<metres>.
    #[arg(long, default_value = "all")]
    region: String,
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(ENV_THREADS) {
        let n: usize = v.parse().with_context(|| format!("{ENV_THREADS}={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = RunConfig::resolve(cli.config.as_deref(), cli.seed)?;
    log::info!("seed {}", cfg.seed);
    log::info!("resolved configuration:\n{}", cfg.to_toml());
    match cli.command {
        Command::Synth { out, frames } => commands::synth(&cfg, out, frames),
        Command::GenData { sequence, out, preset } => commands::gen_data(&cfg, &sequence, &out, preset.as_deref()),
        Command::Train => commands::train(&cfg),
        Command::TrainFusion { checkpoint, strategy } => commands::train_fusion(&cfg, &checkpoint, strategy),
        Command::Eval {
            checkpoint,
            data,
            pred,
            gt,
            region,
        } => commands::eval(
            &cfg,
            EvalArgs {
                checkpoint: checkpoint.as_deref(),
                data: &data,
                pred: pred.as_deref(),
                gt: gt.as_deref(),
                region: commands::parse_region(&region.region)?,
            },
        ),
        Command::Ablate {
            pre,
            inside,
            post,
            data,
            region,
            control,
        } => commands::ablate(&cfg, [&pre, &inside, &post], &data, commands::parse_region(&region.region)?, control),
        Command::Infer {
            checkpoint,
            scan,
            poses,
            out,
            png,
        } => commands::infer(&cfg, &checkpoint, &scan, poses.as_deref(), &out, png.as_deref()),
        Command::Time {
            checkpoint,
            scan,
            warmup,
            iters,
        } => commands::time(&cfg, checkpoint.as_deref(), scan.as_deref(), warmup, iters),
        Command::Viz { map, out, decode } => commands::viz(&cfg, &map, &out, decode),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
