//! RegConsist: self-supervised pixel-pair pre-training for semantic
//! segmentation from multi-view consistency.
//!
//! The pipeline stages, in dependency order:
//! - [`synthworld`]: procedural indoor scenes with an analytic ray-cast
//!   renderer emitting RGB / depth / label / pose frames.
//! - [`io`]: on-disk formats for frames, manifests, pair batches and
//!   checkpoints.
//! - [`geometry`]: cross-view pixel projection, occlusion filtering,
//!   view-overlap IoU and view-pair selection.
//! - [`regions`]: graph-based unsupervised region estimation.
//! - [`matching`]: Cantor-pairing region IoU tables and cross-view
//!   region matching.
//! - [`sampling`]: augmentation and pixel-pair batch construction.
//! - [`ssl`]: Barlow Twins pair loss with analytic gradients, a small
//!   hand-differentiated convolutional encoder and the pre-training loop.
//! - [`supervise`]: focal-loss fine-tuning and mIoU evaluation.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub mod geometry;
pub mod io;
pub mod matching;
pub mod regions;
pub mod sampling;
pub mod ssl;
pub mod supervise;
pub mod synthworld;

/// Scalar type the numeric kernels are generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Scalar used by the geometry pipeline (projection, IoU, warping).
pub type GeomReal = f64;

/// Scalar used by the training pipeline; checkpoints store f32 tensors.
pub type TrainReal = f32;

/// Reserved "no valid class" label in all label rasters.
pub const IGNORE_LABEL: u16 = 65535;
