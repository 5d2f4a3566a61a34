//! Linear-head training over encoder features.
//!
//! The head maps each feature cell to class logits; per-pixel logits come
//! from nearest-neighbor upsampling of the feature map. Training uses SGD
//! with a polynomial learning-rate decay and L2 weight decay, either with
//! the encoder frozen or trained end to end.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::checkpoint::NamedTensor;
use crate::io::Raster;
use crate::ssl::{feature_cell, Encoder, EncoderGrads, Mat, Tensor};
use crate::{Scalar, IGNORE_LABEL};

use super::focal::focal_loss;
use super::{Result, SuperviseError};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<S> {
    pub in_dim: usize,
    pub classes: usize,
    /// [classes, in_dim], row-major.
    pub weight: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> ClassifierHead<S> {
    pub fn init(in_dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = S::from_f64((1.0 / in_dim as f64).sqrt()).unwrap();
        let weight = (0..classes * in_dim)
            .map(|_| S::from_f64(rng.gen_range(-1.0..1.0)).unwrap() * bound)
            .collect();
        Self { in_dim, classes, weight, bias: vec![S::zero(); classes] }
    }

    pub fn logits(&self, feature: &[S]) -> Vec<S> {
        (0..self.classes)
            .map(|c| {
                let row = &self.weight[c * self.in_dim..(c + 1) * self.in_dim];
                self.bias[c] + row.iter().zip(feature).map(|(&w, &f)| w * f).sum::<S>()
            })
            .collect()
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "head.weight".to_string(),
                shape: vec![self.classes, self.in_dim],
                data: self.weight.iter().map(|v| v.to_f32().unwrap()).collect(),
            },
            NamedTensor {
                name: "head.bias".to_string(),
                shape: vec![self.classes],
                data: self.bias.iter().map(|v| v.to_f32().unwrap()).collect(),
            },
        ]
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| SuperviseError::Shape(format!("missing tensor {name}")))
        };
        let w = find("head.weight")?;
        let b = find("head.bias")?;
        if w.shape.len() != 2 {
            return Err(SuperviseError::Shape(format!(
                "head.weight expects 2 dims, got {}",
                w.shape.len()
            )));
        }
        Ok(Self {
            classes: w.shape[0] as usize,
            in_dim: w.shape[1] as usize,
            weight: w.data.iter().map(|&v| S::from_f32(v).unwrap()).collect(),
            bias: b.data.iter().map(|&v| S::from_f32(v).unwrap()).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub rgb: Raster<[u8; 3]>,
    pub labels: Raster<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Train the head only.
    Frozen,
    /// Train head and encoder end to end.
    Full,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub iters: u64,
    pub base_lr: f64,
    pub poly_power: f64,
    pub gamma: f32,
    pub weight_decay: f32,
    pub batch_pixels: usize,
    pub classes: usize,
    pub mode: FinetuneMode,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iters: 80_000,
            base_lr: 0.01,
            poly_power: 0.9,
            gamma: 2.0,
            weight_decay: 5e-4,
            batch_pixels: 1024,
            classes: 8,
            mode: FinetuneMode::Frozen,
            seed: 0,
        }
    }
}

fn poly_lr(iter: u64, cfg: &FinetuneConfig) -> f64 {
    cfg.base_lr * (1.0 - iter as f64 / cfg.iters as f64).powf(cfg.poly_power)
}

/// Pixel indices of each image that carry a usable label.
fn labeled_pixels(images: &[LabeledImage]) -> Result<Vec<Vec<u32>>> {
    let per_image: Vec<Vec<u32>> = images
        .iter()
        .map(|img| {
            img.labels
                .data()
                .iter()
                .enumerate()
                .filter(|(_, &l)| l != IGNORE_LABEL)
                .map(|(i, _)| i as u32)
                .collect()
        })
        .collect();
    if per_image.iter().all(|v| v.is_empty()) {
        return Err(SuperviseError::NoLabeledPixels);
    }
    Ok(per_image)
}

/// Trains a classifier head (and optionally the encoder) on labeled
/// frames. Returns the head and the per-iteration loss.
pub fn finetune(
    encoder: &mut Encoder<f32>,
    images: &[LabeledImage],
    cfg: &FinetuneConfig,
) -> Result<(ClassifierHead<f32>, Vec<f64>)> {
    let labeled = labeled_pixels(images)?;
    let usable: Vec<usize> = (0..images.len()).filter(|&i| !labeled[i].is_empty()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut head = ClassifierHead::<f32>::init(encoder.embed_dim(), cfg.classes, &mut rng);
    let d = encoder.embed_dim();

    // Frozen encoder: feature maps are fixed, compute them once.
    let frozen_feats: Vec<Option<Tensor<f32>>> = if cfg.mode == FinetuneMode::Frozen {
        images
            .iter()
            .map(|img| Some(encoder.forward(&crate::ssl::image_to_tensor(&img.rgb))))
            .collect()
    } else {
        vec![None; images.len()]
    };

    let mut log = Vec::with_capacity(cfg.iters as usize);
    for iter in 0..cfg.iters {
        let fi = usable[rng.gen_range(0..usable.len())];
        let img = &images[fi];
        let (h, w) = (img.rgb.height(), img.rgb.width());

        let full_pass;
        let feats = match &frozen_feats[fi] {
            Some(f) => {
                full_pass = None;
                f
            }
            None => {
                let t = crate::ssl::image_to_tensor(&img.rgb);
                full_pass = Some(encoder.forward_train(&t));
                &full_pass.as_ref().unwrap().0
            }
        };

        // Gather a batch of labeled pixels.
        let n = cfg.batch_pixels.min(labeled[fi].len().max(1));
        let mut features = Mat::<f32>::zeros(n, d);
        let mut targets = Vec::with_capacity(n);
        let mut cells = Vec::with_capacity(n);
        for r in 0..n {
            let pix = labeled[fi][rng.gen_range(0..labeled[fi].len())] as usize;
            let (py, px) = (pix / w, pix % w);
            let (fy, fx) = feature_cell(py, px, h, w, feats.h, feats.w);
            for c in 0..d {
                features.set(r, c, feats.get(c, fy, fx));
            }
            targets.push(img.labels.get(py, px));
            cells.push((fy, fx));
        }

        // Logits and loss.
        let mut logits = Mat::<f32>::zeros(n, cfg.classes);
        for r in 0..n {
            for (c, z) in head.logits(features.row(r)).into_iter().enumerate() {
                logits.set(r, c, z);
            }
        }
        let (loss, dz) = focal_loss(&logits, &targets, cfg.gamma, IGNORE_LABEL)?;
        if !loss.is_finite() {
            return Err(SuperviseError::NonFinite { iter });
        }

        // Head gradients with L2 weight decay.
        let mut gw = vec![0.0f32; head.weight.len()];
        let mut gb = vec![0.0f32; head.bias.len()];
        for r in 0..n {
            for c in 0..cfg.classes {
                let g = dz.get(r, c);
                gb[c] += g;
                for k in 0..d {
                    gw[c * d + k] += g * features.get(r, k);
                }
            }
        }
        for (g, &w) in gw.iter_mut().zip(&head.weight) {
            *g += cfg.weight_decay * w;
        }

        let lr = poly_lr(iter, cfg) as f32;

        if let Some((_, cache)) = &full_pass {
            // Backprop into the encoder: dL/d(feature map), accumulated
            // over batch pixels hitting the same cell.
            let mut gfeat = Tensor::<f32>::zeros(d, feats.h, feats.w);
            for r in 0..n {
                let (fy, fx) = cells[r];
                for k in 0..d {
                    let mut acc = 0.0f32;
                    for c in 0..cfg.classes {
                        acc += dz.get(r, c) * head.weight[c * d + k];
                    }
                    gfeat.add(k, fy, fx, acc);
                }
            }
            let mut grads = encoder.backward(cache, &gfeat);
            add_weight_decay(encoder, &mut grads, cfg.weight_decay);
            encoder.sgd_step(&grads, lr);
        }

        for (w, g) in head.weight.iter_mut().zip(&gw) {
            *w -= lr * g;
        }
        for (b, g) in head.bias.iter_mut().zip(&gb) {
            *b -= lr * g;
        }
        log.push(loss as f64);
    }
    Ok((head, log))
}

fn add_weight_decay(encoder: &Encoder<f32>, grads: &mut EncoderGrads<f32>, wd: f32) {
    for (conv, (gw, _)) in encoder.convs.iter().zip(&mut grads.convs) {
        for (g, &w) in gw.iter_mut().zip(&conv.weight) {
            *g += wd * w;
        }
    }
    for (g, &w) in grads.projector.0.iter_mut().zip(&encoder.projector.weight) {
        *g += wd * w;
    }
}

/// Per-pixel class prediction by nearest-neighbor upsampling of the
/// feature map.
pub fn predict_labels(
    encoder: &Encoder<f32>,
    head: &ClassifierHead<f32>,
    rgb: &Raster<[u8; 3]>,
) -> Raster<u16> {
    let feats = encoder.forward(&crate::ssl::image_to_tensor(rgb));
    let (h, w) = (rgb.height(), rgb.width());
    let d = head.in_dim;
    let mut out = Raster::new(w, h, 0u16);
    // One argmax per feature cell, broadcast to the pixels it covers.
    let mut cell_pred = vec![0u16; feats.h * feats.w];
    let mut feature = vec![0.0f32; d];
    for fy in 0..feats.h {
        for fx in 0..feats.w {
            for (c, f) in feature.iter_mut().enumerate() {
                *f = feats.get(c, fy, fx);
            }
            let logits = head.logits(&feature);
            let best = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i as u16)
                .unwrap_or(0);
            cell_pred[fy * feats.w + fx] = best;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let (fy, fx) = feature_cell(y, x, h, w, feats.h, feats.w);
            out.set(y, x, cell_pred[fy * feats.w + fx]);
        }
    }
    out
}

/// Deterministic choice of which frames keep their labels. The count is
/// `max(1, round(fraction * n))`, capped at `n`.
pub fn split_labeled(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(SuperviseError::TooFewFrames(n));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(SuperviseError::BadFraction(fraction));
    }
    let count = ((fraction * n as f64).round() as usize).max(1).min(n);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    indices.truncate(count);
    indices.sort_unstable();
    Ok(indices)
}
