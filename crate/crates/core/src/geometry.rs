//! Cross-view pixel projection, occlusion filtering, correspondence sets,
//! view-overlap IoU and view-pair selection.
//!
//! Pixel coordinates are `(row, col)`. Camera frame: x right, y down,
//! z forward. Poses are camera-to-world.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::{load_frame, DatasetManifest, Frame, IoError};
use crate::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("degenerate frames: no valid depth pixels in either frame")]
    DegenerateFrames,
    #[error("need at least 2 frames for pair selection, got {0}")]
    NotEnoughFrames(usize),
    #[error("invalid IoU band [{0}, {1}]")]
    InvalidBand(f64, f64),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Pinhole intrinsics. `cx`/`cy` are in pixel units, `(row, col)` indexing
/// puts `cy` on the row axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel<S> {
    pub fx: S,
    pub fy: S,
    pub cx: S,
    pub cy: S,
    pub width: usize,
    pub height: usize,
}

impl<S: Scalar> CameraModel<S> {
    pub fn cast<T: Scalar>(&self) -> CameraModel<T> {
        CameraModel {
            fx: T::from(self.fx).unwrap(),
            fy: T::from(self.fy).unwrap(),
            cx: T::from(self.cx).unwrap(),
            cy: T::from(self.cy).unwrap(),
            width: self.width,
            height: self.height,
        }
    }

    /// Back-projects pixel `(row, col)` at depth `d` into the camera frame.
    #[inline]
    pub fn unproject(&self, row: S, col: S, depth: S) -> [S; 3] {
        [(col - self.cx) / self.fx * depth, (row - self.cy) / self.fy * depth, depth]
    }

    /// Projects a camera-frame point to continuous `(row, col)`; the point
    /// must have positive z.
    #[inline]
    pub fn project(&self, p: [S; 3]) -> (S, S) {
        (self.fy * p[1] / p[2] + self.cy, self.fx * p[0] / p[2] + self.cx)
    }
}

/// Rigid camera-to-world transform: `x_world = R x_cam + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose<S> {
    pub rotation: [[S; 3]; 3],
    pub translation: [S; 3],
}

impl<S: Scalar> Pose<S> {
    pub fn identity() -> Self {
        let z = S::zero();
        let o = S::one();
        Pose { rotation: [[o, z, z], [z, o, z], [z, z, o]], translation: [z, z, z] }
    }

    pub fn cast<T: Scalar>(&self) -> Pose<T> {
        let c = |v: S| T::from(v).unwrap();
        Pose {
            rotation: self.rotation.map(|r| r.map(c)),
            translation: self.translation.map(c),
        }
    }

    #[inline]
    pub fn cam_to_world(&self, p: [S; 3]) -> [S; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    #[inline]
    pub fn world_to_cam(&self, p: [S; 3]) -> [S; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        let d = [p[0] - t[0], p[1] - t[1], p[2] - t[2]];
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Rotates a direction from the camera frame into the world frame.
    #[inline]
    pub fn rotate_to_world(&self, p: [S; 3]) -> [S; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    /// Orthonormal with determinant +1, within `tol`.
    pub fn is_proper_rotation(&self, tol: S) -> bool {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = S::zero();
                for k in 0..3 {
                    dot = dot + r[k][i] * r[k][j];
                }
                let expected = if i == j { S::one() } else { S::zero() };
                if (dot - expected).abs() > tol {
                    return false;
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        (det - S::one()).abs() <= tol
    }
}

/// Continuous projection of an I1 pixel into camera 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPixel<S> {
    pub row: S,
    pub col: S,
    /// z-depth of the 3D point in the camera-2 frame.
    pub depth: S,
}

/// Lifts `pixel` at `depth` through camera 1 into the world, then projects
/// into camera 2. Returns `None` when the point lies behind camera 2.
pub fn project_pixel<S: Scalar>(
    cam: &CameraModel<S>,
    pose1: &Pose<S>,
    pose2: &Pose<S>,
    pixel: (S, S),
    depth: S,
) -> Option<ProjectedPixel<S>> {
    debug_assert!(depth > S::zero() && depth.is_finite());
    let p_cam1 = cam.unproject(pixel.0, pixel.1, depth);
    let p_world = pose1.cam_to_world(p_cam1);
    let p_cam2 = pose2.world_to_cam(p_world);
    if p_cam2[2] <= S::zero() {
        return None;
    }
    let (row, col) = cam.project(p_cam2);
    Some(ProjectedPixel { row, col, depth: p_cam2[2] })
}

/// A pixel-pair in the exact correspondence set: `p` in I1, `q` in I2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub p: (u32, u32),
    pub q: (u32, u32),
    pub depth_at_p: f64,
}

/// Occlusion test: projected depth must match the observed depth at the
/// target pixel within a relative tolerance.
#[inline]
pub fn passes_occlusion(depth_projected: f64, depth_observed: f64, epsilon_rel: f64) -> bool {
    (depth_projected - depth_observed).abs() <= epsilon_rel * depth_observed
}

/// Computes the exact correspondence set from frame1 into frame2: every
/// valid-depth pixel whose projection lands in bounds, rounds to a
/// valid-depth pixel and passes the occlusion test.
pub fn compute_correspondences(
    frame1: &Frame,
    frame2: &Frame,
    epsilon_rel: f64,
) -> Vec<Correspondence> {
    let cam = frame1.camera.cast::<f64>();
    let mut out = Vec::new();
    for row in 0..frame1.depth.height() {
        for col in 0..frame1.depth.width() {
            if !frame1.depth_valid(row, col) {
                continue;
            }
            let depth = frame1.depth.get(row, col) as f64;
            let Some(proj) =
                project_pixel(&cam, &frame1.pose, &frame2.pose, (row as f64, col as f64), depth)
            else {
                continue;
            };
            let q_row = proj.row.round();
            let q_col = proj.col.round();
            if !frame2.depth.in_bounds(q_row as i64, q_col as i64) {
                continue;
            }
            let (qr, qc) = (q_row as usize, q_col as usize);
            if !frame2.depth_valid(qr, qc) {
                continue;
            }
            let observed = frame2.depth.get(qr, qc) as f64;
            if passes_occlusion(proj.depth, observed, epsilon_rel) {
                out.push(Correspondence {
                    p: (row as u32, col as u32),
                    q: (qr as u32, qc as u32),
                    depth_at_p: depth,
                });
            }
        }
    }
    out
}

/// Symmetric covered-fraction overlap:
/// `(|C12| + |C21|) / (|valid(I1)| + |valid(I2)|)`.
pub fn view_overlap_iou(frame1: &Frame, frame2: &Frame, epsilon_rel: f64) -> Result<f64> {
    let valid1 = frame1.valid_depth_count();
    let valid2 = frame2.valid_depth_count();
    if valid1 + valid2 == 0 {
        return Err(GeometryError::DegenerateFrames);
    }
    let c12 = compute_correspondences(frame1, frame2, epsilon_rel).len();
    let c21 = compute_correspondences(frame2, frame1, epsilon_rel).len();
    Ok((c12 + c21) as f64 / (valid1 + valid2) as f64)
}

/// An unordered frame pair whose view IoU fell inside the selection band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPair {
    pub id1: String,
    pub id2: String,
    pub iou: f64,
}

fn cache_key(manifest: &DatasetManifest, iou_low: f64, iou_high: f64, epsilon_rel: f64) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(manifest).expect("manifest serializes"));
    hasher.update(format!("band={iou_low:e},{iou_high:e};eps={epsilon_rel:e}"));
    let digest = hasher.finalize();
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

pub fn read_pair_cache(path: &Path) -> Result<Vec<ViewPair>> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| IoError::Missing { path: path.to_path_buf(), source })?;
    let mut pairs = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        pairs.push(serde_json::from_str(line).map_err(|e| IoError::Json {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?);
    }
    Ok(pairs)
}

pub fn write_pair_cache(pairs: &[ViewPair], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for pair in pairs {
        serde_json::to_writer(&mut out, pair)
            .map_err(|e| IoError::Json { path: path.to_path_buf(), detail: e.to_string() })?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path)
        .map_err(|source| IoError::Write { path: path.to_path_buf(), source })?;
    file.write_all(&out)
        .map_err(|source| IoError::Write { path: path.to_path_buf(), source })?;
    Ok(())
}

pub fn pair_cache_path(
    cache_dir: &Path,
    manifest: &DatasetManifest,
    iou_low: f64,
    iou_high: f64,
    epsilon_rel: f64,
) -> PathBuf {
    cache_dir.join(format!("viewpairs-{}.jsonl", cache_key(manifest, iou_low, iou_high, epsilon_rel)))
}

/// Selects every unordered frame pair whose view IoU lies in
/// `[iou_low, iou_high]`. Results are cached to disk keyed by
/// (manifest hash, band, epsilon); `jobs` caps worker threads.
pub fn select_view_pairs(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    iou_low: f64,
    iou_high: f64,
    epsilon_rel: f64,
    cache_dir: Option<&Path>,
    jobs: usize,
) -> Result<Vec<ViewPair>> {
    if !(0.0..=1.0).contains(&iou_low) || !(0.0..=1.0).contains(&iou_high) || iou_low >= iou_high {
        return Err(GeometryError::InvalidBand(iou_low, iou_high));
    }
    if manifest.frames.len() < 2 {
        return Err(GeometryError::NotEnoughFrames(manifest.frames.len()));
    }

    let cache_path = cache_dir.map(|d| pair_cache_path(d, manifest, iou_low, iou_high, epsilon_rel));
    if let Some(path) = &cache_path {
        if path.exists() {
            return read_pair_cache(path);
        }
    }

    let mut frames = Vec::with_capacity(manifest.frames.len());
    for record in &manifest.frames {
        frames.push(load_frame(manifest, manifest_dir, &record.id)?);
    }

    let n = frames.len();
    let index_pairs: Vec<(usize, usize)> =
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let jobs = jobs.max(1).min(index_pairs.len().max(1));

    let mut ious = vec![0.0f64; index_pairs.len()];
    std::thread::scope(|scope| {
        let frames = &frames;
        let index_pairs = &index_pairs;
        let chunk = index_pairs.len().div_ceil(jobs);
        for (slot, task) in ious.chunks_mut(chunk).zip(index_pairs.chunks(chunk)) {
            scope.spawn(move || {
                for (out, &(i, j)) in slot.iter_mut().zip(task) {
                    *out = view_overlap_iou(&frames[i], &frames[j], epsilon_rel)
                        .unwrap_or(0.0);
                }
            });
        }
    });

    let pairs: Vec<ViewPair> = index_pairs
        .iter()
        .zip(&ious)
        .filter(|&(_, &iou)| iou >= iou_low && iou <= iou_high)
        .map(|(&(i, j), &iou)| ViewPair {
            id1: frames[i].id.clone(),
            id2: frames[j].id.clone(),
            iou,
        })
        .collect();

    if let Some(path) = &cache_path {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|source| IoError::Write { path: parent.to_path_buf(), source })?;
        }
        write_pair_cache(&pairs, path)?;
    }
    Ok(pairs)
}
