//! Experiment configuration: one versioned JSON file covering every
//! pipeline stage. Unknown keys are rejected; command-line flags override
//! individual values after parsing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use regconsist::regions::SigmaMode;
use regconsist::supervise::FinetuneMode;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub pairing: PairingSection,
    #[serde(default)]
    pub regions: RegionsSection,
    #[serde(default)]
    pub matching: MatchingSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub ssl: SslSection,
    #[serde(default)]
    pub supervise: SuperviseSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset: Default::default(),
            pairing: Default::default(),
            regions: Default::default(),
            matching: Default::default(),
            sampling: Default::default(),
            ssl: Default::default(),
            supervise: Default::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if !(self.pairing.iou_low < self.pairing.iou_high)
            || !(0.0..=1.0).contains(&self.pairing.iou_low)
            || !(0.0..=1.0).contains(&self.pairing.iou_high)
        {
            return Err(CliError::Config(format!(
                "pairing band [{}, {}] is not a valid sub-interval of [0, 1]",
                self.pairing.iou_low, self.pairing.iou_high
            )));
        }
        regconsist::sampling::SamplingConfig::parse_strategy(&self.sampling.strategy)
            .map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.supervise.fraction > 0.0 && self.supervise.fraction <= 1.0) {
            return Err(CliError::Config(format!(
                "supervise.fraction must be in (0, 1], got {}",
                self.supervise.fraction
            )));
        }
        if !matches!(self.supervise.init.as_str(), "checkpoint" | "random") {
            return Err(CliError::Config(format!(
                "supervise.init must be checkpoint or random, got {:?}",
                self.supervise.init
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Existing dataset manifest; when set, the genworld stage is skipped.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default = "d_world_seed")]
    pub seed: u64,
    #[serde(default = "d_objects")]
    pub objects: usize,
    #[serde(default = "d_room")]
    pub room: [f64; 3],
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    #[serde(default = "d_view_height")]
    pub view_height: f64,
    #[serde(default = "d_grid_step")]
    pub grid_step: f64,
    #[serde(default = "d_yaw_step")]
    pub yaw_step_deg: u32,
}

fn d_world_seed() -> u64 {
    7
}
fn d_objects() -> usize {
    6
}
fn d_room() -> [f64; 3] {
    [6.0, 4.0, 2.5]
}
fn d_image_size() -> usize {
    128
}
fn d_view_height() -> f64 {
    1.25
}
fn d_grid_step() -> f64 {
    1.0
}
fn d_yaw_step() -> u32 {
    45
}

impl Default for DatasetSection {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairingSection {
    #[serde(default = "d_iou_low")]
    pub iou_low: f64,
    #[serde(default = "d_iou_high")]
    pub iou_high: f64,
    #[serde(default = "d_epsilon_rel")]
    pub epsilon_rel: f64,
}

fn d_iou_low() -> f64 {
    0.3
}
fn d_iou_high() -> f64 {
    0.9
}
fn d_epsilon_rel() -> f64 {
    0.01
}

impl Default for PairingSection {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionsSection {
    #[serde(default = "d_scale")]
    pub scale: f64,
    #[serde(default = "d_sigma")]
    pub sigma: f64,
    #[serde(default = "d_sigma_mode")]
    pub mode: SigmaMode,
    #[serde(default = "d_min_size")]
    pub min_size: usize,
}

fn d_scale() -> f64 {
    250.0
}
fn d_sigma() -> f64 {
    0.8
}
fn d_sigma_mode() -> SigmaMode {
    SigmaMode::Blur
}
fn d_min_size() -> usize {
    64
}

impl Default for RegionsSection {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchingSection {
    #[serde(default = "d_tau")]
    pub tau: f64,
}

fn d_tau() -> f64 {
    0.5
}

impl Default for MatchingSection {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    /// One of random-exact, random-region, balanced-exact, balanced-region.
    #[serde(default = "d_strategy")]
    pub strategy: String,
    /// |S|: pixel pairs per training step, summed over view pairs.
    #[serde(default = "d_pairs_per_batch")]
    pub pairs_per_batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_crop_size")]
    pub crop_size: usize,
    /// Use the wider (0.5, 1.0) strong-crop scale.
    #[serde(default)]
    pub wide_crop: bool,
}

fn d_strategy() -> String {
    "balanced-region".to_string()
}
fn d_pairs_per_batch() -> usize {
    2048
}
fn d_crop_size() -> usize {
    64
}

impl Default for SamplingSection {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslSection {
    #[serde(default = "d_channels")]
    pub channels: Vec<usize>,
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "d_total_iters")]
    pub total_iters: u64,
    #[serde(default = "d_warmup_iters")]
    pub warmup_iters: u64,
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f32,
    #[serde(default = "d_grad_clip")]
    pub grad_clip_norm: f32,
    /// Mean-center embedding columns before normalization.
    #[serde(default = "d_center")]
    pub center: bool,
    #[serde(default = "d_view_pairs_per_step")]
    pub view_pairs_per_step: usize,
    #[serde(default)]
    pub init_seed: u64,
}

fn d_channels() -> Vec<usize> {
    vec![16, 24, 32]
}
fn d_embed_dim() -> usize {
    32
}
fn d_total_iters() -> u64 {
    2000
}
fn d_warmup_iters() -> u64 {
    100
}
fn d_base_lr() -> f64 {
    0.01
}
fn d_lambda() -> f32 {
    0.005
}
fn d_grad_clip() -> f32 {
    5.0
}
fn d_center() -> bool {
    true
}
fn d_view_pairs_per_step() -> usize {
    16
}

impl Default for SslSection {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuperviseSection {
    /// Fraction of frames whose labels are used.
    #[serde(default = "d_fraction")]
    pub fraction: f64,
    #[serde(default = "d_gamma")]
    pub gamma: f32,
    #[serde(default = "d_sup_iters")]
    pub iters: u64,
    #[serde(default = "d_sup_lr")]
    pub base_lr: f64,
    #[serde(default = "d_poly_power")]
    pub poly_power: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f32,
    #[serde(default = "d_batch_pixels")]
    pub batch_pixels: usize,
    #[serde(default = "d_mode")]
    pub mode: FinetuneMode,
    #[serde(default)]
    pub seed: u64,
    /// Class count; inferred from the dataset labels when absent.
    #[serde(default)]
    pub classes: Option<usize>,
    /// Encoder initialization: "checkpoint" or "random".
    #[serde(default = "d_init")]
    pub init: String,
}

fn d_init() -> String {
    "checkpoint".to_string()
}

fn d_fraction() -> f64 {
    0.05
}
fn d_gamma() -> f32 {
    2.0
}
fn d_sup_iters() -> u64 {
    2000
}
fn d_sup_lr() -> f64 {
    0.01
}
fn d_poly_power() -> f64 {
    0.9
}
fn d_weight_decay() -> f32 {
    5e-4
}
fn d_batch_pixels() -> usize {
    1024
}
fn d_mode() -> FinetuneMode {
    FinetuneMode::Frozen
}

impl Default for SuperviseSection {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_sections_give_defaults() {
        let config: ExperimentConfig = serde_json::from_str(r#"{"version": 1}"#).unwrap();
        config.validate().unwrap();
        assert_eq!(config.pairing.iou_low, 0.3);
        assert_eq!(config.regions.scale, 250.0);
        assert_eq!(config.sampling.strategy, "balanced-region");
        assert_eq!(config.ssl.grad_clip_norm, 5.0);
        assert_eq!(config.supervise.weight_decay, 5e-4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"version": 1, "extra": 3}"#);
        assert!(err.is_err());
        let err =
            serde_json::from_str::<ExperimentConfig>(r#"{"version": 1, "pairing": {"iou": 1}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn wrong_version_is_a_config_error() {
        let config: ExperimentConfig = serde_json::from_str(r#"{"version": 9}"#).unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn invalid_band_is_a_config_error() {
        let config: ExperimentConfig =
            serde_json::from_str(r#"{"version": 1, "pairing": {"iou_low": 0.9, "iou_high": 0.3}}"#)
                .unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn unknown_strategy_is_a_config_error() {
        let config: ExperimentConfig =
            serde_json::from_str(r#"{"version": 1, "sampling": {"strategy": "upside-down"}}"#)
                .unwrap();
        assert!(config.validate().is_err());
    }
}
