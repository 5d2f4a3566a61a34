//! Pipeline orchestration binary: one subcommand per stage plus ablation
//! and run-all, over a single JSON experiment config.

mod ablate;
mod config;
mod provenance;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ablate::{run_ablation, AblationAxis};
use config::ExperimentConfig;
use stages::{generate_world, run_stage, Stage, StageCtx, ALL_STAGES};

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or flags (exit 2).
    Config(String),
    /// Missing upstream stage output (exit 3).
    Dependency(String),
    /// Numerical abort, e.g. a non-finite loss (exit 4).
    Numeric(String),
    /// Everything else (exit 1).
    Other(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Dependency(msg) => write!(f, "dependency error: {msg}"),
            CliError::Numeric(msg) => write!(f, "numerical abort: {msg}"),
            CliError::Other(msg) => write!(f, "{msg}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "regconsist", version, about = "Self-supervised multi-view segmentation pipeline")]
struct Cli {
    /// Experiment directory; defaults to $REGCONSIST_WORKDIR, then ./workdir.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread cap for parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Rerun stages even when up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Genworld {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        objects: Option<usize>,
        /// Write the dataset here instead of the workdir stage directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select view pairs by overlap IoU.
    PairSelect {
        #[arg(long)]
        iou_low: Option<f64>,
        #[arg(long)]
        iou_high: Option<f64>,
    },
    /// Estimate regions per frame.
    Segment {
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        min_size: Option<usize>,
    },
    /// Match regions across each view pair.
    MatchRegions {
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Persist one pixel-pair batch per view pair.
    SamplePairs {
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Self-supervised encoder pre-training.
    Pretrain,
    /// Supervised fine-tuning on a labeled fraction.
    Finetune {
        /// "checkpoint" or "random".
        #[arg(long)]
        init: Option<String>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate mIoU on held-out frames.
    Eval {
        /// Extra copy of the report JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rerun the training pipeline along one axis.
    Ablate {
        /// strategy, iou_band or fraction.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; axis defaults when omitted.
        #[arg(long)]
        values: Option<String>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Run every stage in order.
    RunAll,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    match &cli.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn workdir(cli: &Cli) -> PathBuf {
    cli.workdir
        .clone()
        .or_else(|| std::env::var_os("REGCONSIST_WORKDIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("workdir"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = load_config(&cli)?;
    let mut report_path = None;

    // Flag overrides onto the effective config.
    match &cli.command {
        Command::Genworld { seed, objects, .. } => {
            if let Some(seed) = seed {
                config.dataset.seed = *seed;
            }
            if let Some(objects) = objects {
                config.dataset.objects = *objects;
            }
        }
        Command::PairSelect { iou_low, iou_high } => {
            if let Some(v) = iou_low {
                config.pairing.iou_low = *v;
            }
            if let Some(v) = iou_high {
                config.pairing.iou_high = *v;
            }
        }
        Command::Segment { scale, sigma, min_size } => {
            if let Some(v) = scale {
                config.regions.scale = *v;
            }
            if let Some(v) = sigma {
                config.regions.sigma = *v;
            }
            if let Some(v) = min_size {
                config.regions.min_size = *v;
            }
        }
        Command::MatchRegions { tau } => {
            if let Some(v) = tau {
                config.matching.tau = *v;
            }
        }
        Command::SamplePairs { strategy, pairs, seed } => {
            if let Some(v) = strategy {
                config.sampling.strategy = v.clone();
            }
            if let Some(v) = pairs {
                config.sampling.pairs_per_batch = *v;
            }
            if let Some(v) = seed {
                config.sampling.seed = *v;
            }
        }
        Command::Finetune { init, fraction, seed } => {
            if let Some(v) = init {
                config.supervise.init = v.clone();
            }
            if let Some(v) = fraction {
                config.supervise.fraction = *v;
            }
            if let Some(v) = seed {
                config.supervise.seed = *v;
            }
        }
        Command::Eval { report } => {
            report_path = report.clone();
        }
        Command::Pretrain | Command::Ablate { .. } | Command::RunAll => {}
    }
    config.validate()?;

    let ctx = StageCtx {
        workdir: workdir(&cli),
        config,
        jobs: cli.jobs.max(1),
        force: cli.force,
        report_path,
    };
    std::fs::create_dir_all(&ctx.workdir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", ctx.workdir.display())))?;

    match cli.command {
        Command::Genworld { out: Some(out), .. } => {
            generate_world(&ctx.config, &out)?;
            println!("genworld: dataset written to {}", out.display());
            Ok(())
        }
        Command::Genworld { .. } => run_stage(&ctx, Stage::Genworld).map(|_| ()),
        Command::PairSelect { .. } => run_stage(&ctx, Stage::PairSelect).map(|_| ()),
        Command::Segment { .. } => run_stage(&ctx, Stage::Segment).map(|_| ()),
        Command::MatchRegions { .. } => run_stage(&ctx, Stage::MatchRegions).map(|_| ()),
        Command::SamplePairs { .. } => run_stage(&ctx, Stage::SamplePairs).map(|_| ()),
        Command::Pretrain => run_stage(&ctx, Stage::Pretrain).map(|_| ()),
        Command::Finetune { .. } => run_stage(&ctx, Stage::Finetune).map(|_| ()),
        Command::Eval { .. } => run_stage(&ctx, Stage::Eval).map(|_| ()),
        Command::Ablate { axis, values, seeds } => {
            let axis = AblationAxis::parse(&axis)?;
            let csv = run_ablation(&ctx, axis, values.as_deref(), seeds)?;
            println!("ablate: table written to {}", csv.display());
            Ok(())
        }
        Command::RunAll => {
            for stage in ALL_STAGES {
                if stage == Stage::Genworld && ctx.config.dataset.manifest.is_some() {
                    continue;
                }
                run_stage(&ctx, stage)?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
