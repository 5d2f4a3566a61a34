//! Ablation driver: rerun the training half of the pipeline while one
//! axis varies, sharing the generated dataset, and emit a CSV comparison
//! table with one row per value and one mIoU column per seed.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::config::ExperimentConfig;
use crate::stages::{read_miou, run_stage, Stage, StageCtx};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Strategy,
    IouBand,
    Fraction,
}

impl AblationAxis {
    pub fn parse(name: &str) -> Result<Self, CliError> {
        match name {
            "strategy" => Ok(Self::Strategy),
            "iou_band" | "iou-band" => Ok(Self::IouBand),
            "fraction" => Ok(Self::Fraction),
            other => Err(CliError::Config(format!(
                "unknown ablation axis {other:?}; expected strategy, iou_band or fraction"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Strategy => "strategy",
            Self::IouBand => "iou_band",
            Self::Fraction => "fraction",
        }
    }

    fn default_values(&self) -> Vec<String> {
        match self {
            Self::Strategy => ["random-exact", "random-region", "balanced-exact", "balanced-region"]
                .map(String::from)
                .to_vec(),
            Self::IouBand => vec!["0.3:0.7".to_string(), "0.7:0.9".to_string()],
            Self::Fraction => vec!["0.05", "0.10", "0.20", "0.30"].into_iter().map(String::from).collect(),
        }
    }

    fn apply(&self, config: &mut ExperimentConfig, value: &str) -> Result<(), CliError> {
        match self {
            Self::Strategy => {
                config.sampling.strategy = value.to_string();
            }
            Self::IouBand => {
                let (low, high) = value.split_once(':').ok_or_else(|| {
                    CliError::Config(format!("iou_band value {value:?} must look like 0.3:0.7"))
                })?;
                config.pairing.iou_low = low
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad iou_band bound {low:?}")))?;
                config.pairing.iou_high = high
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad iou_band bound {high:?}")))?;
            }
            Self::Fraction => {
                config.supervise.fraction = value
                    .parse()
                    .map_err(|_| CliError::Config(format!("bad fraction {value:?}")))?;
            }
        }
        config.validate()
    }
}

fn slug(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}

/// Runs pair-select through eval once per (value, seed) under
/// `workdir/ablate/<axis>/`, reusing the main workdir's dataset, and
/// writes `workdir/ablate/<axis>.csv`.
pub fn run_ablation(
    ctx: &StageCtx,
    axis: AblationAxis,
    values: Option<&str>,
    seeds: usize,
) -> Result<PathBuf, CliError> {
    if seeds == 0 {
        return Err(CliError::Config("need at least one seed".to_string()));
    }
    let values: Vec<String> = match values {
        Some(list) => list.split(',').map(|v| v.trim().to_string()).collect(),
        None => axis.default_values(),
    };
    if values.is_empty() {
        return Err(CliError::Config("no ablation values given".to_string()));
    }

    // The dataset is the shared upstream cache.
    if ctx.config.dataset.manifest.is_none() {
        run_stage(ctx, Stage::Genworld)?;
    }
    let manifest_path = ctx.manifest_path();

    let mut csv = String::from("value");
    for k in 0..seeds {
        write!(csv, ",seed{k}").unwrap();
    }
    csv.push_str(",mean\n");

    for value in &values {
        let mut mious = Vec::with_capacity(seeds);
        for seed in 0..seeds {
            let mut config = ctx.config.clone();
            config.dataset.manifest = Some(manifest_path.clone());
            axis.apply(&mut config, value)?;
            config.ssl.init_seed = seed as u64;
            config.sampling.seed = seed as u64;
            config.supervise.seed = seed as u64;
            let sub = StageCtx {
                workdir: ctx
                    .workdir
                    .join("ablate")
                    .join(axis.name())
                    .join(slug(value))
                    .join(format!("seed{seed}")),
                config,
                jobs: ctx.jobs,
                force: ctx.force,
                report_path: None,
            };
            for stage in [
                Stage::PairSelect,
                Stage::Segment,
                Stage::MatchRegions,
                Stage::SamplePairs,
                Stage::Pretrain,
                Stage::Finetune,
                Stage::Eval,
            ] {
                run_stage(&sub, stage)?;
            }
            mious.push(read_miou(&sub.stage_dir(Stage::Eval))?);
        }
        let mean = mious.iter().sum::<f64>() / mious.len() as f64;
        write!(csv, "{value}").unwrap();
        for m in &mious {
            write!(csv, ",{m:.6}").unwrap();
        }
        writeln!(csv, ",{mean:.6}").unwrap();
        println!("ablate {}={}: mean mIoU {:.4}", axis.name(), value, mean);
    }

    let out_dir = ctx.workdir.join("ablate");
    std::fs::create_dir_all(&out_dir).map_err(|e| CliError::Other(e.to_string()))?;
    let csv_path = out_dir.join(format!("{}.csv", axis.name()));
    std::fs::write(&csv_path, csv).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(csv_path)
}
