//! On-disk representations: frames, dataset manifests, pair batches and
//! model checkpoints.
//!
//! Poses are stored camera-to-world: `T` maps camera coordinates into the
//! world frame. The convention is recorded in the manifest header.

pub mod checkpoint;
pub mod pair_batch_file;
pub mod raster;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraModel, Pose};
use crate::IGNORE_LABEL;

pub use pair_batch_file::{load_pair_batch, save_pair_batch};
pub use raster::{
    read_depth, read_pgm16, read_ppm, write_depth, write_pgm16, write_ppm, Raster,
};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("missing file {path}: {source}")]
    Missing { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("truncated file {path}: {source}")]
    Truncated { path: PathBuf, source: std::io::Error },
    #[error("bad header in {path}: {detail}")]
    Header { path: PathBuf, detail: String },
    #[error("dimension mismatch in {path}: {detail}")]
    Dimensions { path: PathBuf, detail: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("unknown frame id {0:?}")]
    UnknownFrame(String),
    #[error("bad JSON in {path}: {detail}")]
    Json { path: PathBuf, detail: String },
    #[error("corrupt pair batch {path} at byte offset {offset}: {detail}")]
    PairBatch { path: PathBuf, offset: u64, detail: String },
    #[error("corrupt checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, IoError>;

/// Pose convention used by every manifest this crate writes.
pub const POSE_CONVENTION: &str = "camera_to_world";

/// One view on disk: raster paths plus pose and camera reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub id: String,
    pub rgb_path: String,
    pub depth_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<String>,
    pub pose: Pose<f64>,
    pub camera_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Pose convention tag; must equal [`POSE_CONVENTION`].
    pub pose_convention: String,
    /// Unit note for translations and depth values.
    pub world_units: String,
    pub ignore_label: u16,
    pub cameras: BTreeMap<String, CameraModel<f64>>,
    pub frames: Vec<FrameRecord>,
}

impl DatasetManifest {
    pub fn new(cameras: BTreeMap<String, CameraModel<f64>>, frames: Vec<FrameRecord>) -> Self {
        Self {
            pose_convention: POSE_CONVENTION.to_string(),
            world_units: "meters".to_string(),
            ignore_label: IGNORE_LABEL,
            cameras,
            frames,
        }
    }

    /// Frame ids unique, camera references valid, poses proper rotations.
    pub fn validate(&self) -> Result<()> {
        if self.pose_convention != POSE_CONVENTION {
            return Err(IoError::Manifest(format!(
                "unsupported pose convention {:?} (expected {POSE_CONVENTION:?})",
                self.pose_convention
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for frame in &self.frames {
            if !seen.insert(&frame.id) {
                return Err(IoError::Manifest(format!("duplicate frame id {:?}", frame.id)));
            }
            if !self.cameras.contains_key(&frame.camera_id) {
                return Err(IoError::Manifest(format!(
                    "frame {:?} references unknown camera {:?}",
                    frame.id, frame.camera_id
                )));
            }
            if !frame.pose.is_proper_rotation(1e-6) {
                return Err(IoError::Manifest(format!(
                    "frame {:?} pose rotation is not orthonormal with determinant +1",
                    frame.id
                )));
            }
        }
        Ok(())
    }

    pub fn frame(&self, id: &str) -> Result<&FrameRecord> {
        self.frames
            .iter()
            .find(|f| f.id == id)
            .ok_or_else(|| IoError::UnknownFrame(id.to_string()))
    }

    pub fn camera_for(&self, record: &FrameRecord) -> Result<&CameraModel<f64>> {
        self.cameras
            .get(&record.camera_id)
            .ok_or_else(|| IoError::Manifest(format!("unknown camera {:?}", record.camera_id)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| IoError::Json { path: path.to_path_buf(), detail: e.to_string() })?;
        std::fs::write(path, text).map_err(|source| IoError::Write { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| IoError::Missing { path: path.to_path_buf(), source })?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| IoError::Json { path: path.to_path_buf(), detail: e.to_string() })?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Fully materialized view: rasters in memory plus pose and intrinsics.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: String,
    pub rgb: Raster<[u8; 3]>,
    /// Depth in meters; values <= 0 or non-finite are holes.
    pub depth: Raster<f32>,
    pub labels: Option<Raster<u16>>,
    pub pose: Pose<f64>,
    pub camera: CameraModel<f64>,
}

impl Frame {
    #[inline]
    pub fn depth_valid(&self, row: usize, col: usize) -> bool {
        let d = self.depth.get(row, col);
        d.is_finite() && d > 0.0
    }

    pub fn valid_depth_count(&self) -> usize {
        self.depth.data().iter().filter(|d| d.is_finite() && **d > 0.0).count()
    }
}

/// Loads a frame's rasters, resolving paths relative to the manifest dir.
pub fn load_frame(manifest: &DatasetManifest, manifest_dir: &Path, id: &str) -> Result<Frame> {
    let record = manifest.frame(id)?;
    let camera = manifest.camera_for(record)?.clone();

    let rgb_path = manifest_dir.join(&record.rgb_path);
    let rgb = raster::read_ppm(&rgb_path)?;
    if rgb.width() != camera.width || rgb.height() != camera.height {
        return Err(IoError::Dimensions {
            path: rgb_path,
            detail: format!(
                "rgb is {}x{}, camera {:?} says {}x{}",
                rgb.width(), rgb.height(), record.camera_id, camera.width, camera.height
            ),
        });
    }

    let depth_path = manifest_dir.join(&record.depth_path);
    let depth = raster::read_depth(&depth_path)?;
    if !depth.same_shape(&rgb) {
        return Err(IoError::Dimensions {
            path: depth_path,
            detail: format!(
                "depth is {}x{}, rgb is {}x{}",
                depth.width(), depth.height(), rgb.width(), rgb.height()
            ),
        });
    }

    let labels = match &record.label_path {
        Some(rel) => {
            let label_path = manifest_dir.join(rel);
            let labels = raster::read_pgm16(&label_path)?;
            if !labels.same_shape(&rgb) {
                return Err(IoError::Dimensions {
                    path: label_path,
                    detail: format!(
                        "labels are {}x{}, rgb is {}x{}",
                        labels.width(), labels.height(), rgb.width(), rgb.height()
                    ),
                });
            }
            Some(labels)
        }
        None => None,
    };

    Ok(Frame { id: record.id.clone(), rgb, depth, labels, pose: record.pose.clone(), camera })
}
