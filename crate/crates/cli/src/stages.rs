//! Pipeline stages with provenance tracking and idempotent reruns.
//!
//! Stages form a linear dependency chain:
//! genworld -> pair-select -> segment -> match-regions -> sample-pairs ->
//! pretrain -> finetune -> eval. Each stage writes its outputs under
//! `workdir/<stage>/` together with the effective config and a provenance
//! record; a rerun whose config and input hashes match is a no-op.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use regconsist::geometry::{
    compute_correspondences, read_pair_cache, select_view_pairs, write_pair_cache, CameraModel,
    Correspondence, ViewPair,
};
use regconsist::io::checkpoint::{load_tensors, save_tensors};
use regconsist::io::{
    load_frame, read_pgm16, write_pgm16, DatasetManifest, Frame, Raster,
};
use regconsist::matching::{match_regions, region_iou_table, warp_region_map, RegionMatch};
use regconsist::regions::{segment_graph, RegionMap};
use regconsist::sampling::{
    augment, sample_pair_batch, AugmentProfile, CropMap, PairSampleContext, SamplingConfig,
    SamplingError,
};
use regconsist::ssl::{
    pretrain, Encoder, EncoderConfig, PretrainConfig, PretrainStep,
};
use regconsist::supervise::{
    evaluate_miou, finetune, predict_labels, split_labeled, write_class_overlay, ClassifierHead,
    FinetuneConfig, LabeledImage, SuperviseError,
};
use regconsist::synthworld::{emit_dataset, generate_scene, sample_grid_views};
use regconsist::IGNORE_LABEL;

use crate::config::ExperimentConfig;
use crate::provenance::{hash_file, hash_json, hash_outputs, Provenance, TOOL_VERSION};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Genworld,
    PairSelect,
    Segment,
    MatchRegions,
    SamplePairs,
    Pretrain,
    Finetune,
    Eval,
}

pub const ALL_STAGES: [Stage; 8] = [
    Stage::Genworld,
    Stage::PairSelect,
    Stage::Segment,
    Stage::MatchRegions,
    Stage::SamplePairs,
    Stage::Pretrain,
    Stage::Finetune,
    Stage::Eval,
];

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Genworld => "genworld",
            Stage::PairSelect => "pair-select",
            Stage::Segment => "segment",
            Stage::MatchRegions => "match-regions",
            Stage::SamplePairs => "sample-pairs",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
        }
    }
}

pub struct StageCtx {
    pub workdir: PathBuf,
    pub config: ExperimentConfig,
    pub jobs: usize,
    pub force: bool,
    /// Extra report copy for the eval stage.
    pub report_path: Option<PathBuf>,
}

impl StageCtx {
    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.workdir.join(stage.name())
    }

    /// Directory holding manifest.json: the configured external dataset or
    /// the genworld output.
    pub fn manifest_dir(&self) -> PathBuf {
        match &self.config.dataset.manifest {
            Some(path) => path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            None => self.stage_dir(Stage::Genworld),
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        match &self.config.dataset.manifest {
            Some(path) => path.clone(),
            None => self.stage_dir(Stage::Genworld).join("manifest.json"),
        }
    }

    fn require_manifest(&self) -> Result<PathBuf, CliError> {
        let path = self.manifest_path();
        if !path.exists() {
            return Err(CliError::Dependency(format!(
                "dataset manifest {} not found; run genworld first",
                path.display()
            )));
        }
        Ok(path)
    }

    fn require_stage(&self, stage: Stage) -> Result<PathBuf, CliError> {
        let dir = self.stage_dir(stage);
        if !Provenance::path(&dir).exists() {
            return Err(CliError::Dependency(format!("run {} first", stage.name())));
        }
        Ok(Provenance::path(&dir))
    }
}

fn stage_config(stage: Stage, config: &ExperimentConfig) -> serde_json::Value {
    match stage {
        Stage::Genworld => json!({ "dataset": config.dataset }),
        Stage::PairSelect => json!({ "pairing": config.pairing }),
        Stage::Segment => json!({ "regions": config.regions }),
        Stage::MatchRegions => {
            json!({ "matching": config.matching, "epsilon_rel": config.pairing.epsilon_rel })
        }
        Stage::SamplePairs => json!({ "sampling": config.sampling }),
        Stage::Pretrain => json!({
            "sampling": config.sampling,
            "ssl": config.ssl,
            "epsilon_rel": config.pairing.epsilon_rel,
        }),
        Stage::Finetune => json!({ "supervise": config.supervise, "ssl": config.ssl }),
        Stage::Eval => json!({ "classes": config.supervise.classes }),
    }
}

fn input_hashes(ctx: &StageCtx, stage: Stage) -> Result<BTreeMap<String, String>, CliError> {
    let mut inputs = BTreeMap::new();
    let add_manifest = |inputs: &mut BTreeMap<String, String>| -> Result<(), CliError> {
        inputs.insert("manifest".to_string(), hash_file(&ctx.require_manifest()?)?);
        Ok(())
    };
    let add_stage = |inputs: &mut BTreeMap<String, String>, s: Stage| -> Result<(), CliError> {
        inputs.insert(s.name().to_string(), hash_file(&ctx.require_stage(s)?)?);
        Ok(())
    };
    match stage {
        Stage::Genworld => {}
        Stage::PairSelect | Stage::Segment => add_manifest(&mut inputs)?,
        Stage::MatchRegions => {
            add_manifest(&mut inputs)?;
            add_stage(&mut inputs, Stage::PairSelect)?;
            add_stage(&mut inputs, Stage::Segment)?;
        }
        Stage::SamplePairs | Stage::Pretrain => {
            add_manifest(&mut inputs)?;
            add_stage(&mut inputs, Stage::PairSelect)?;
            add_stage(&mut inputs, Stage::Segment)?;
            add_stage(&mut inputs, Stage::MatchRegions)?;
            if stage == Stage::Pretrain {
                add_stage(&mut inputs, Stage::SamplePairs)?;
            }
        }
        Stage::Finetune => {
            add_manifest(&mut inputs)?;
            if ctx.config.supervise.init == "checkpoint" {
                add_stage(&mut inputs, Stage::Pretrain)?;
            }
        }
        Stage::Eval => {
            add_manifest(&mut inputs)?;
            add_stage(&mut inputs, Stage::Finetune)?;
        }
    }
    Ok(inputs)
}

/// Runs one stage. Returns false when the stage was already up to date.
pub fn run_stage(ctx: &StageCtx, stage: Stage) -> Result<bool, CliError> {
    if stage == Stage::Genworld && ctx.config.dataset.manifest.is_some() {
        return Err(CliError::Config(
            "dataset.manifest is set; genworld does not apply to external datasets".to_string(),
        ));
    }
    let config_hash = hash_json(&stage_config(stage, &ctx.config));
    let inputs = input_hashes(ctx, stage)?;
    let dir = ctx.stage_dir(stage);

    if !ctx.force {
        if let Some(prov) = Provenance::load(&dir) {
            if prov.matches(&config_hash, &inputs) {
                println!("{}: up to date", stage.name());
                return Ok(false);
            }
        }
    }

    if dir.exists() {
        std::fs::remove_dir_all(&dir)
            .map_err(|e| CliError::Other(format!("cannot clear {}: {e}", dir.display())))?;
    }
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))?;

    match stage {
        Stage::Genworld => run_genworld(ctx, &dir)?,
        Stage::PairSelect => run_pair_select(ctx, &dir)?,
        Stage::Segment => run_segment(ctx, &dir)?,
        Stage::MatchRegions => run_match_regions(ctx, &dir)?,
        Stage::SamplePairs => run_sample_pairs(ctx, &dir)?,
        Stage::Pretrain => run_pretrain(ctx, &dir)?,
        Stage::Finetune => run_finetune(ctx, &dir)?,
        Stage::Eval => run_eval(ctx, &dir)?,
    }

    let effective = serde_json::to_string_pretty(&ctx.config).expect("serializable");
    std::fs::write(dir.join("config.json"), effective)
        .map_err(|e| CliError::Other(format!("cannot write config dump: {e}")))?;
    let prov = Provenance {
        stage: stage.name().to_string(),
        tool_version: TOOL_VERSION.to_string(),
        config_hash,
        input_hashes: inputs,
        output_hashes: hash_outputs(&dir)?,
    };
    prov.save(&dir)?;
    println!("{}: done", stage.name());
    Ok(true)
}

fn run_genworld(ctx: &StageCtx, dir: &Path) -> Result<(), CliError> {
    generate_world(&ctx.config, dir)
}

/// Generates the synthetic dataset into an arbitrary directory.
pub fn generate_world(config: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))?;
    let d = &config.dataset;
    let scene = generate_scene(d.seed, d.objects, d.room)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let half = d.image_size as f64 / 2.0;
    let cam = CameraModel {
        fx: half,
        fy: half,
        cx: half,
        cy: half,
        width: d.image_size,
        height: d.image_size,
    };
    let poses = sample_grid_views(&scene, d.view_height, d.grid_step, d.yaw_step_deg)
        .map_err(|e| CliError::Config(e.to_string()))?;
    emit_dataset(&scene, &cam, &poses, dir).map_err(|e| CliError::Other(e.to_string()))?;
    let scene_json = serde_json::to_string_pretty(&scene).expect("serializable");
    std::fs::write(dir.join("scene.json"), scene_json)
        .map_err(|e| CliError::Other(e.to_string()))?;
    println!("genworld: {} views", poses.len());
    Ok(())
}

fn load_manifest(ctx: &StageCtx) -> Result<(DatasetManifest, PathBuf), CliError> {
    let path = ctx.require_manifest()?;
    let manifest = DatasetManifest::load(&path).map_err(|e| CliError::Other(e.to_string()))?;
    Ok((manifest, ctx.manifest_dir()))
}

fn run_pair_select(ctx: &StageCtx, dir: &Path) -> Result<(), CliError> {
    let (manifest, mdir) = load_manifest(ctx)?;
    let p = &ctx.config.pairing;
    let pairs = select_view_pairs(
        &manifest,
        &mdir,
        p.iou_low,
        p.iou_high,
        p.epsilon_rel,
        Some(dir),
        ctx.jobs,
    )
    .map_err(|e| CliError::Other(e.to_string()))?;
    write_pair_cache(&pairs, &dir.join("pairs.jsonl"))
        .map_err(|e| CliError::Other(e.to_string()))?;
    println!("pair-select: {} pairs in band [{}, {}]", pairs.len(), p.iou_low, p.iou_high);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RegionMeta {
    count: u32,
    sizes: Vec<u64>,
}

fn region_map_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.pgm")), dir.join(format!("{id}.json")))
}

fn save_region_map(dir: &Path, id: &str, map: &RegionMap) -> Result<(), CliError> {
    if map.count > u16::MAX as u32 {
        return Err(CliError::Other(format!(
            "frame {id}: {} regions exceed the 16-bit label format",
            map.count
        )));
    }
    let (pgm, meta) = region_map_paths(dir, id);
    let as_u16 = map.labels.map(|l| l as u16);
    write_pgm16(&as_u16, &pgm).map_err(|e| CliError::Other(e.to_string()))?;
    let meta_json = serde_json::to_string(&RegionMeta { count: map.count, sizes: map.sizes.clone() })
        .expect("serializable");
    std::fs::write(meta, meta_json).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(())
}

fn load_region_map(dir: &Path, id: &str) -> Result<RegionMap, CliError> {
    let (pgm, meta) = region_map_paths(dir, id);
    let labels = read_pgm16(&pgm).map_err(|e| CliError::Other(e.to_string()))?;
    let meta_text = std::fs::read_to_string(&meta)
        .map_err(|e| CliError::Other(format!("cannot read {}: {e}", meta.display())))?;
    let meta: RegionMeta =
        serde_json::from_str(&meta_text).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(RegionMap { labels: labels.map(|l| l as u32), count: meta.count, sizes: meta.sizes })
}

fn run_segment(ctx: &StageCtx, dir: &Path) -> Result<(), CliError> {
    let (manifest, mdir) = load_manifest(ctx)?;
    let r = &ctx.config.regions;
    let mut total_regions = 0u64;
    for record in &manifest.frames {
        let frame = load_frame(&manifest, &mdir, &record.id)
            .map_err(|e| CliError::Other(e.to_string()))?;
        let map = segment_graph(&frame.rgb, r.scale, r.sigma, r.mode, r.min_size);
        total_regions += map.count as u64;
        save_region_map(dir, &record.id, &map)?;
    }
    println!(
        "segment: {} frames, {:.1} regions/frame",
        manifest.frames.len(),
        total_regions as f64 / manifest.frames.len().max(1) as f64
    );
    Ok(())
}

fn pair_stem(pair: &ViewPair) -> String {
    format!("{}__{}", pair.id1, pair.id2)
}

fn load_pairs(ctx: &StageCtx) -> Result<Vec<ViewPair>, CliError> {
    let path = ctx.stage_dir(Stage::PairSelect).join("pairs.jsonl");
    read_pair_cache(&path).map_err(|e| CliError::Other(e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct TableRow {
    u: u32,
    v: u32,
    intersection: u64,
    iou: f64,
}

#[derive(Serialize, Deserialize)]
struct MatchRow {
    u: u32,
    v: u32,
    iou: f64,
}

fn run_match_regions(ctx: &StageCtx, dir: &Path) -> Result<(), CliError> {
    let (manifest, mdir) = load_manifest(ctx)?;
    let pairs = load_pairs(ctx)?;
    let segment_dir = ctx.stage_dir(Stage::Segment);
    let epsilon = ctx.config.pairing.epsilon_rel;
    let tau = ctx.config.matching.tau;
    let mut total_matches = 0usize;
    for pair in &pairs {
        let f1 = load_frame(&manifest, &mdir, &pair.id1)
            .map_err(|e| CliError::Other(e.to_string()))?;
        let f2 = load_frame(&manifest, &mdir, &pair.id2)
            .map_err(|e| CliError::Other(e.to_string()))?;
        let map1 = load_region_map(&segment_dir, &pair.id1)?;
        let map2 = load_region_map(&segment_dir, &pair.id2)?;
        let warped = warp_region_map(&map1, &f1, &f2, epsilon);
        let table = region_iou_table(&warped, &map2)
            .map_err(|e| CliError::Other(e.to_string()))?;
        let matches = match_regions(&table, tau);
        total_matches += matches.len();

        let stem = pair_stem(pair);
        let mut table_text = String::new();
        for e in &table {
            let row = TableRow { u: e.u, v: e.v, intersection: e.intersection, iou: e.iou };
            table_text.push_str(&serde_json::to_string(&row).expect("serializable"));
            table_text.push('\n');
        }
        std::fs::write(dir.join(format!("{stem}.table.jsonl")), table_text)
            .map_err(|e| CliError::Other(e.to_string()))?;
        let mut match_text = String::new();
        for m in &matches {
            let row = MatchRow { u: m.u, v: m.v, iou: m.iou };
            match_text.push_str(&serde_json::to_string(&row).expect("serializable"));
            match_text.push('\n');
        }
        std::fs::write(dir.join(format!("{stem}.matches.jsonl")), match_text)
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    println!("match-regions: {} pairs, {} matched regions", pairs.len(), total_matches);
    Ok(())
}

fn load_matches(dir: &Path, pair: &ViewPair) -> Result<Vec<RegionMatch>, CliError> {
    let path = dir.join(format!("{}.matches.jsonl", pair_stem(pair)));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Other(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row: MatchRow =
            serde_json::from_str(line).map_err(|e| CliError::Other(e.to_string()))?;
        out.push(RegionMatch { u: row.u, v: row.v, iou: row.iou });
    }
    Ok(out)
}

fn sampling_config(ctx: &StageCtx, pairs_per_batch: usize) -> Result<SamplingConfig, CliError> {
    let (sampler, matcher) =
        SamplingConfig::parse_strategy(&ctx.config.sampling.strategy)
            .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(SamplingConfig { sampler, matcher, pairs_per_batch, seed: ctx.config.sampling.seed })
}

fn run_sample_pairs(ctx: &StageCtx, dir: &Path) -> Result<(), CliError> {
    let (manifest, mdir) = load_manifest(ctx)?;
    let pairs = load_pairs(ctx)?;
    let segment_dir = ctx.stage_dir(Stage::Segment);
    let match_dir = ctx.stage_dir(Stage::MatchRegions);
    let epsilon = ctx.config.pairing.epsilon_rel;
    let cfg = sampling_config(ctx, ctx.config.sampling.pairs_per_batch)?;
    let mut written = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let f1 = load_frame(&manifest, &mdir, &pair.id1)
            .map_err(|e| CliError::Other(e.to_string()))?;
        let f2 = load_frame(&manifest, &mdir, &pair.id2)
            .map_err(|e| CliError::Other(e.to_string()))?;
        let map1 = load_region_map(&segment_dir, &pair.id1)?;
        let map2 = load_region_map(&segment_dir, &pair.id2)?;
        let matches = load_matches(&match_dir, pair)?;
        let corrs = compute_correspondences(&f1, &f2, epsilon);
        let crop1 = CropMap::identity(f1.rgb.height(), f1.rgb.width());
        let crop2 = CropMap::identity(f2.rgb.height(), f2.rgb.width());
        let sample_ctx = PairSampleContext {
            id1: &pair.id1,
            id2: &pair.id2,
            correspondences: &corrs,
            regmap1: &map1,
            regmap2: &map2,
            matches: &matches,
            map1: &crop1,
            map2: &crop2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
        match sample_pair_batch(&sample_ctx, &cfg, &mut rng) {
            Ok(batch) => {
                let path = dir.join(format!("{}.rcpb", pair_stem(pair)));
                regconsist::io::save_pair_batch(&batch, &path)
                    .map_err(|e| CliError::Other(e.to_string()))?;
                written += 1;
            }
            Err(SamplingError::NoEligiblePixels(_)) => continue,
            Err(e) => return Err(CliError::Other(e.to_string())),
        }
    }
    if written == 0 {
        return Err(CliError::Other(
            "no view pair produced any eligible pixel pairs".to_string(),
        ));
    }
    println!("sample-pairs: {written} batches");
    Ok(())
}

/// Everything the training stages need in memory.
struct TrainData {
    frames: Vec<Frame>,
    index: HashMap<String, usize>,
    pairs: Vec<ViewPair>,
    regmaps: Vec<RegionMap>,
    matches: Vec<Vec<RegionMatch>>,
    corrs: Vec<Vec<Correspondence>>,
}

fn load_train_data(ctx: &StageCtx) -> Result<TrainData, CliError> {
    let (manifest, mdir) = load_manifest(ctx)?;
    let segment_dir = ctx.stage_dir(Stage::Segment);
    let match_dir = ctx.stage_dir(Stage::MatchRegions);
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut regmaps = Vec::with_capacity(manifest.frames.len());
    let mut index = HashMap::new();
    for record in &manifest.frames {
        index.insert(record.id.clone(), frames.len());
        frames.push(
            load_frame(&manifest, &mdir, &record.id)
                .map_err(|e| CliError::Other(e.to_string()))?,
        );
        regmaps.push(load_region_map(&segment_dir, &record.id)?);
    }
    let pairs = load_pairs(ctx)?;
    let epsilon = ctx.config.pairing.epsilon_rel;
    let mut matches = Vec::with_capacity(pairs.len());
    let mut corrs = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        matches.push(load_matches(&match_dir, pair)?);
        let f1 = &frames[index[&pair.id1]];
        let f2 = &frames[index[&pair.id2]];
        corrs.push(compute_correspondences(f1, f2, epsilon));
    }
    Ok(TrainData { frames, index, pairs, regmaps, matches, corrs })
}

fn run_pretrain(ctx: &StageCtx, dir: &Path) -> Result<(), CliError> {
    let data = load_train_data(ctx)?;
    if data.pairs.is_empty() {
        return Err(CliError::Other("no view pairs selected; widen the IoU band".to_string()));
    }
    let s = &ctx.config.ssl;
    let samp = &ctx.config.sampling;
    let per_pair = (samp.pairs_per_batch / s.view_pairs_per_step.max(1)).max(1);
    let cfg = sampling_config(ctx, per_pair)?;
    let strong = if samp.wide_crop {
        AugmentProfile::strong_wide_crop(samp.crop_size)
    } else {
        AugmentProfile::strong(samp.crop_size)
    };
    let weak = AugmentProfile::weak(samp.crop_size);

    let encoder_config = EncoderConfig { channels: s.channels.clone(), embed_dim: s.embed_dim };
    let mut encoder =
        Encoder::<f32>::init(&encoder_config, &mut ChaCha8Rng::seed_from_u64(s.init_seed));
    let train_cfg = PretrainConfig {
        iters: s.total_iters,
        base_lr: s.base_lr,
        warmup_iters: s.warmup_iters,
        lambda: s.lambda,
        clip_norm: s.grad_clip_norm,
        center: s.center,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(samp.seed);
    let view_pairs_per_step = s.view_pairs_per_step.max(1);
    let source = |_iter: u64| -> Vec<PretrainStep> {
        let mut steps = Vec::with_capacity(view_pairs_per_step);
        let mut attempts = 0;
        while steps.len() < view_pairs_per_step && attempts < view_pairs_per_step * 5 {
            attempts += 1;
            let pi = rng.gen_range(0..data.pairs.len());
            let pair = &data.pairs[pi];
            let i1 = data.index[&pair.id1];
            let i2 = data.index[&pair.id2];
            let view1 = augment(&data.frames[i1].rgb, &strong, &mut rng);
            let view2 = augment(&data.frames[i2].rgb, &weak, &mut rng);
            let sample_ctx = PairSampleContext {
                id1: &pair.id1,
                id2: &pair.id2,
                correspondences: &data.corrs[pi],
                regmap1: &data.regmaps[i1],
                regmap2: &data.regmaps[i2],
                matches: &data.matches[pi],
                map1: &view1.map,
                map2: &view2.map,
            };
            match sample_pair_batch(&sample_ctx, &cfg, &mut rng) {
                Ok(batch) if !batch.pairs.is_empty() => {
                    steps.push(PretrainStep {
                        view1: view1.rgb,
                        view2: view2.rgb,
                        pairs: batch.pairs,
                    });
                }
                _ => continue,
            }
        }
        steps
    };

    let log = pretrain(&mut encoder, &train_cfg, source).map_err(|e| match e {
        regconsist::ssl::SslError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        other => CliError::Other(other.to_string()),
    })?;

    save_tensors(&encoder.to_tensors(), &dir.join("checkpoint.rcck"))
        .map_err(|e| CliError::Other(e.to_string()))?;
    let mut csv = std::fs::File::create(dir.join("loss.csv"))
        .map_err(|e| CliError::Other(e.to_string()))?;
    writeln!(csv, "iter,loss,lr").map_err(|e| CliError::Other(e.to_string()))?;
    for rec in &log {
        writeln!(csv, "{},{},{}", rec.iter, rec.loss, rec.lr)
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    println!(
        "pretrain: {} iters, final loss {:.4}",
        log.len(),
        log.last().map(|r| r.loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Class count: configured, or one past the largest non-ignore label.
fn infer_classes(ctx: &StageCtx, frames: &[Frame]) -> Result<usize, CliError> {
    if let Some(classes) = ctx.config.supervise.classes {
        return Ok(classes);
    }
    let max = frames
        .iter()
        .filter_map(|f| f.labels.as_ref())
        .flat_map(|l| l.data().iter())
        .filter(|&&l| l != IGNORE_LABEL)
        .max();
    match max {
        Some(&m) => Ok(m as usize + 1),
        None => Err(CliError::Other("dataset has no labeled frames".to_string())),
    }
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    labeled_ids: Vec<String>,
}

fn run_finetune(ctx: &StageCtx, dir: &Path) -> Result<(), CliError> {
    let (manifest, mdir) = load_manifest(ctx)?;
    let sup = &ctx.config.supervise;
    let mut frames = Vec::new();
    for record in &manifest.frames {
        frames.push(
            load_frame(&manifest, &mdir, &record.id)
                .map_err(|e| CliError::Other(e.to_string()))?,
        );
    }
    let classes = infer_classes(ctx, &frames)?;
    let chosen = split_labeled(frames.len(), sup.fraction, sup.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let images: Vec<LabeledImage> = chosen
        .iter()
        .map(|&i| {
            let f = &frames[i];
            LabeledImage {
                rgb: f.rgb.clone(),
                labels: f.labels.clone().unwrap_or_else(|| {
                    Raster::new(f.rgb.width(), f.rgb.height(), IGNORE_LABEL)
                }),
            }
        })
        .collect();

    let mut encoder = match sup.init.as_str() {
        "checkpoint" => {
            let path = ctx.stage_dir(Stage::Pretrain).join("checkpoint.rcck");
            let tensors = load_tensors(&path).map_err(|e| CliError::Other(e.to_string()))?;
            Encoder::<f32>::from_tensors(&tensors).map_err(|e| CliError::Other(e.to_string()))?
        }
        "random" => {
            let encoder_config = EncoderConfig {
                channels: ctx.config.ssl.channels.clone(),
                embed_dim: ctx.config.ssl.embed_dim,
            };
            Encoder::<f32>::init(&encoder_config, &mut ChaCha8Rng::seed_from_u64(sup.seed))
        }
        other => {
            return Err(CliError::Config(format!(
                "supervise.init must be checkpoint or random, got {other:?}"
            )))
        }
    };

    let cfg = FinetuneConfig {
        iters: sup.iters,
        base_lr: sup.base_lr,
        poly_power: sup.poly_power,
        gamma: sup.gamma,
        weight_decay: sup.weight_decay,
        batch_pixels: sup.batch_pixels,
        classes,
        mode: sup.mode,
        seed: sup.seed,
    };
    let (head, log) = finetune(&mut encoder, &images, &cfg).map_err(|e| match e {
        SuperviseError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        other => CliError::Other(other.to_string()),
    })?;

    let mut tensors = encoder.to_tensors();
    tensors.extend(head.to_tensors());
    save_tensors(&tensors, &dir.join("model.rcck")).map_err(|e| CliError::Other(e.to_string()))?;
    let split = SplitRecord {
        labeled_ids: chosen.iter().map(|&i| manifest.frames[i].id.clone()).collect(),
    };
    std::fs::write(dir.join("split.json"), serde_json::to_string_pretty(&split).unwrap())
        .map_err(|e| CliError::Other(e.to_string()))?;
    let mut csv = std::fs::File::create(dir.join("loss.csv"))
        .map_err(|e| CliError::Other(e.to_string()))?;
    writeln!(csv, "iter,loss").map_err(|e| CliError::Other(e.to_string()))?;
    for (i, loss) in log.iter().enumerate() {
        writeln!(csv, "{i},{loss}").map_err(|e| CliError::Other(e.to_string()))?;
    }
    println!(
        "finetune: {} labeled frames ({} init), final loss {:.4}",
        images.len(),
        sup.init,
        log.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    classes: usize,
    evaluated_frames: Vec<String>,
    confusion_matrix: Vec<Vec<u64>>,
    per_class_iou: Vec<Option<f64>>,
    miou_present: f64,
    miou_all: f64,
}

fn run_eval(ctx: &StageCtx, dir: &Path) -> Result<(), CliError> {
    let (manifest, mdir) = load_manifest(ctx)?;
    let finetune_dir = ctx.stage_dir(Stage::Finetune);
    let tensors = load_tensors(&finetune_dir.join("model.rcck"))
        .map_err(|e| CliError::Other(e.to_string()))?;
    let encoder =
        Encoder::<f32>::from_tensors(&tensors).map_err(|e| CliError::Other(e.to_string()))?;
    let head = ClassifierHead::<f32>::from_tensors(&tensors)
        .map_err(|e| CliError::Other(e.to_string()))?;
    let split_text = std::fs::read_to_string(finetune_dir.join("split.json"))
        .map_err(|e| CliError::Other(e.to_string()))?;
    let split: SplitRecord =
        serde_json::from_str(&split_text).map_err(|e| CliError::Other(e.to_string()))?;

    // Held-out frames; fall back to all frames when everything was labeled.
    let mut eval_ids: Vec<String> = manifest
        .frames
        .iter()
        .map(|r| r.id.clone())
        .filter(|id| !split.labeled_ids.contains(id))
        .collect();
    if eval_ids.is_empty() {
        eval_ids = manifest.frames.iter().map(|r| r.id.clone()).collect();
    }

    let classes = head.classes;
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for (i, id) in eval_ids.iter().enumerate() {
        let frame =
            load_frame(&manifest, &mdir, id).map_err(|e| CliError::Other(e.to_string()))?;
        let truth = frame.labels.clone().ok_or_else(|| {
            CliError::Other(format!("frame {id} has no labels; cannot evaluate"))
        })?;
        let pred = predict_labels(&encoder, &head, &frame.rgb);
        if i < 4 {
            write_class_overlay(&frame.rgb, &pred, &dir.join(format!("overlay-{id}.ppm")))
                .map_err(|e| CliError::Other(e.to_string()))?;
        }
        preds.push(pred);
        truths.push(truth);
    }
    let pairs: Vec<(&Raster<u16>, &Raster<u16>)> = preds.iter().zip(truths.iter()).collect();
    let report = evaluate_miou(&pairs, classes, IGNORE_LABEL)
        .map_err(|e| CliError::Other(e.to_string()))?;
    let mut cm = vec![0u64; classes * classes];
    for (p, t) in &pairs {
        for (v, add) in cm
            .iter_mut()
            .zip(regconsist::supervise::confusion_matrix(p, t, classes, IGNORE_LABEL)
                .map_err(|e| CliError::Other(e.to_string()))?)
        {
            *v += add;
        }
    }
    let out = EvalReport {
        classes,
        evaluated_frames: eval_ids,
        confusion_matrix: (0..classes)
            .map(|r| cm[r * classes..(r + 1) * classes].to_vec())
            .collect(),
        per_class_iou: report.per_class.clone(),
        miou_present: report.mean_present,
        miou_all: report.mean_all,
    };
    let text = serde_json::to_string_pretty(&out).expect("serializable");
    std::fs::write(dir.join("report.json"), &text)
        .map_err(|e| CliError::Other(e.to_string()))?;
    if let Some(extra) = &ctx.report_path {
        std::fs::write(extra, &text).map_err(|e| CliError::Other(e.to_string()))?;
    }
    println!(
        "eval: mIoU {:.4} (present classes), {:.4} (all classes)",
        report.mean_present, report.mean_all
    );
    Ok(())
}

/// Reads the headline mIoU from an eval stage directory.
pub fn read_miou(eval_dir: &Path) -> Result<f64, CliError> {
    let text = std::fs::read_to_string(eval_dir.join("report.json"))
        .map_err(|e| CliError::Other(e.to_string()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Other(e.to_string()))?;
    value["miou_present"]
        .as_f64()
        .ok_or_else(|| CliError::Other("report.json lacks miou_present".to_string()))
}
