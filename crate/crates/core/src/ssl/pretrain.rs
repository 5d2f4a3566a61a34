//! Pre-training loop: gather paired embeddings, apply the pair loss,
//! clip gradients and step plain SGD under a warmup-plus-cosine schedule.

use crate::io::Raster;
use crate::sampling::PixelPair;

use super::barlow::barlow_backward;
use super::encoder::{image_to_tensor, Encoder, EncoderGrads, Tensor};
use super::mat::Mat;
use super::{Result, SslError};

/// Learning rate at `iter` of `total`: linear warmup from 0 to `base`
/// over `warmup` iterations, then cosine decay so the final iteration is
/// exactly `base / 10`.
pub fn lr_at(iter: u64, total: u64, warmup: u64, base: f64) -> f64 {
    if iter < warmup {
        return base * (iter + 1) as f64 / warmup as f64;
    }
    let denom = total.saturating_sub(1).saturating_sub(warmup);
    let progress = if denom == 0 { 1.0 } else { (iter - warmup) as f64 / denom as f64 };
    base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Image pixel to feature-map cell for an integer downscale.
#[inline]
pub fn feature_cell(
    row: usize,
    col: usize,
    img_h: usize,
    img_w: usize,
    feat_h: usize,
    feat_w: usize,
) -> (usize, usize) {
    (row * feat_h / img_h, col * feat_w / img_w)
}

/// One view pair's contribution to a training iteration: two augmented
/// images and pixel pairs in their coordinates.
pub struct PretrainStep {
    pub view1: Raster<[u8; 3]>,
    pub view2: Raster<[u8; 3]>,
    pub pairs: Vec<PixelPair>,
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub iters: u64,
    pub base_lr: f64,
    pub warmup_iters: u64,
    pub lambda: f32,
    pub clip_norm: f32,
    /// Mean-center embedding columns before normalization.
    pub center: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            iters: 50_000,
            base_lr: 0.01,
            warmup_iters: 2_500,
            lambda: 0.005,
            clip_norm: 5.0,
            center: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
}

struct ViewPass {
    embed: Tensor<f32>,
    cache: super::encoder::EncoderCache<f32>,
    img_h: usize,
    img_w: usize,
}

/// Runs the loop; `source` supplies the steps for each iteration. Returns
/// one loss record per iteration, or the iteration at which the loss went
/// non-finite.
pub fn pretrain<F>(
    encoder: &mut Encoder<f32>,
    cfg: &PretrainConfig,
    mut source: F,
) -> Result<Vec<LossRecord>>
where
    F: FnMut(u64) -> Vec<PretrainStep>,
{
    let mut log = Vec::with_capacity(cfg.iters as usize);
    for iter in 0..cfg.iters {
        let steps = source(iter);

        // Forward both views of every step, then gather paired embeddings
        // into one batch.
        let mut passes: Vec<(ViewPass, ViewPass)> = Vec::with_capacity(steps.len());
        let mut total_pairs = 0;
        for step in &steps {
            let t1 = image_to_tensor(&step.view1);
            let t2 = image_to_tensor(&step.view2);
            let (e1, c1) = encoder.forward_train(&t1);
            let (e2, c2) = encoder.forward_train(&t2);
            total_pairs += step.pairs.len();
            passes.push((
                ViewPass { embed: e1, cache: c1, img_h: step.view1.height(), img_w: step.view1.width() },
                ViewPass { embed: e2, cache: c2, img_h: step.view2.height(), img_w: step.view2.width() },
            ));
        }
        if total_pairs == 0 {
            return Err(SslError::EmptyBatch);
        }

        let d = encoder.embed_dim();
        let mut p = Mat::<f32>::zeros(total_pairs, d);
        let mut q = Mat::<f32>::zeros(total_pairs, d);
        let mut row = 0;
        for (step, (v1, v2)) in steps.iter().zip(&passes) {
            for pair in &step.pairs {
                let (fr, fc) = feature_cell(
                    pair.p.0 as usize,
                    pair.p.1 as usize,
                    v1.img_h,
                    v1.img_w,
                    v1.embed.h,
                    v1.embed.w,
                );
                let (gr, gc) = feature_cell(
                    pair.q.0 as usize,
                    pair.q.1 as usize,
                    v2.img_h,
                    v2.img_w,
                    v2.embed.h,
                    v2.embed.w,
                );
                for ch in 0..d {
                    p.set(row, ch, v1.embed.get(ch, fr, fc));
                    q.set(row, ch, v2.embed.get(ch, gr, gc));
                }
                row += 1;
            }
        }

        if p.data().iter().chain(q.data()).any(|v| !v.is_finite()) {
            return Err(SslError::NonFinite { iter });
        }
        let (loss, grads) = barlow_backward(&p, &q, cfg.lambda, cfg.center)?;
        if !loss.is_finite() {
            return Err(SslError::NonFinite { iter });
        }

        // Scatter pair gradients back onto each view's embedding map and
        // run the encoder backward.
        let mut total = EncoderGrads::zeros_like(encoder);
        let mut row = 0;
        for (step, (v1, v2)) in steps.iter().zip(&passes) {
            let mut ge1 = Tensor::zeros(v1.embed.ch, v1.embed.h, v1.embed.w);
            let mut ge2 = Tensor::zeros(v2.embed.ch, v2.embed.h, v2.embed.w);
            for pair in &step.pairs {
                let (fr, fc) = feature_cell(
                    pair.p.0 as usize,
                    pair.p.1 as usize,
                    v1.img_h,
                    v1.img_w,
                    v1.embed.h,
                    v1.embed.w,
                );
                let (gr, gc) = feature_cell(
                    pair.q.0 as usize,
                    pair.q.1 as usize,
                    v2.img_h,
                    v2.img_w,
                    v2.embed.h,
                    v2.embed.w,
                );
                for ch in 0..d {
                    ge1.add(ch, fr, fc, grads.dp.get(row, ch));
                    ge2.add(ch, gr, gc, grads.dq.get(row, ch));
                }
                row += 1;
            }
            total.add_assign(&encoder.backward(&v1.cache, &ge1));
            total.add_assign(&encoder.backward(&v2.cache, &ge2));
        }

        let norm = total.norm();
        if !norm.is_finite() {
            return Err(SslError::NonFinite { iter });
        }
        if norm > cfg.clip_norm {
            total.scale(cfg.clip_norm / norm);
        }

        let lr = lr_at(iter, cfg.iters, cfg.warmup_iters, cfg.base_lr);
        encoder.sgd_step(&total, lr as f32);
        log.push(LossRecord { iter, loss: loss as f64, lr });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssl::encoder::EncoderConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_warms_up_then_decays_to_a_tenth() {
        let (total, warmup, base) = (1000, 100, 0.01);
        assert!((lr_at(0, total, warmup, base) - base / warmup as f64).abs() < 1e-15);
        assert!((lr_at(warmup - 1, total, warmup, base) - base).abs() < 1e-15);
        assert!((lr_at(warmup, total, warmup, base) - base).abs() < 1e-15);
        assert!((lr_at(total - 1, total, warmup, base) - base / 10.0).abs() < 1e-15);
        for t in warmup..total - 1 {
            assert!(lr_at(t + 1, total, warmup, base) <= lr_at(t, total, warmup, base));
        }
        for t in 0..warmup {
            assert!(lr_at(t, total, warmup, base) <= base + 1e-15);
        }
    }

    #[test]
    fn schedule_without_warmup_starts_at_base() {
        assert!((lr_at(0, 100, 0, 0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn feature_cells_cover_integer_downscale() {
        assert_eq!(feature_cell(0, 0, 64, 64, 8, 8), (0, 0));
        assert_eq!(feature_cell(7, 7, 64, 64, 8, 8), (0, 0));
        assert_eq!(feature_cell(8, 0, 64, 64, 8, 8), (1, 0));
        assert_eq!(feature_cell(63, 63, 64, 64, 8, 8), (7, 7));
    }

    fn toy_image(seed: u64) -> Raster<[u8; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = Raster::new(16, 16, [0u8; 3]);
        for px in img.data_mut() {
            *px = [rng.gen(), rng.gen(), rng.gen()];
        }
        img
    }

    fn toy_steps() -> Vec<PretrainStep> {
        // Same image in both views, identity pairs: the loss should fall
        // as matching cells decorrelate across dimensions.
        let img = toy_image(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs = (0..64)
            .map(|_| {
                let p = (rng.gen_range(0..16u16), rng.gen_range(0..16u16));
                PixelPair { p, q: p }
            })
            .collect();
        vec![PretrainStep { view1: img.clone(), view2: img, pairs }]
    }

    #[test]
    fn loss_decreases_on_a_toy_problem() {
        let config = EncoderConfig { channels: vec![4, 4, 4], embed_dim: 4 };
        let mut enc = Encoder::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let cfg = PretrainConfig {
            iters: 40,
            base_lr: 0.05,
            warmup_iters: 5,
            ..PretrainConfig::default()
        };
        let log = pretrain(&mut enc, &cfg, |_| toy_steps()).unwrap();
        assert_eq!(log.len(), 40);
        assert!(log.last().unwrap().loss < log.first().unwrap().loss);
        assert!(enc.params_finite());
    }

    #[test]
    fn non_finite_loss_reports_the_iteration() {
        let config = EncoderConfig { channels: vec![4, 4, 4], embed_dim: 4 };
        let mut enc = Encoder::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let cfg = PretrainConfig {
            iters: 10,
            base_lr: f64::NAN,
            warmup_iters: 0,
            ..PretrainConfig::default()
        };
        match pretrain(&mut enc, &cfg, |_| toy_steps()) {
            Err(SslError::NonFinite { iter }) => assert_eq!(iter, 1),
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic() {
        let config = EncoderConfig { channels: vec![4, 4, 4], embed_dim: 4 };
        let cfg = PretrainConfig { iters: 10, base_lr: 0.02, warmup_iters: 2, ..Default::default() };
        let run = || {
            let mut enc = Encoder::init(&config, &mut ChaCha8Rng::seed_from_u64(8));
            pretrain(&mut enc, &cfg, |_| toy_steps()).unwrap();
            enc
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_batch_is_an_error() {
        let config = EncoderConfig { channels: vec![4], embed_dim: 4 };
        let mut enc = Encoder::init(&config, &mut ChaCha8Rng::seed_from_u64(0));
        let cfg = PretrainConfig { iters: 1, ..Default::default() };
        let img = toy_image(1);
        let result = pretrain(&mut enc, &cfg, |_| {
            vec![PretrainStep { view1: img.clone(), view2: img.clone(), pairs: vec![] }]
        });
        assert!(matches!(result, Err(SslError::EmptyBatch)));
    }
}
