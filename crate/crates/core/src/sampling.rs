//! Pixel-pair batch construction.
//!
//! A pair batch joins pixels of two augmented views. The first pixel `p`
//! is drawn from view 1 either uniformly over all eligible pixels
//! (`random`) or with an equal quota per eligible region (`balanced`);
//! its partner `q` is either the geometric correspondence (`exact`) or a
//! uniform draw from the matched region (`region`). Pair coordinates are
//! expressed in augmented-image pixels; pairs whose coordinates leave a
//! crop are resampled a bounded number of times, so a batch may come up
//! short of the requested size.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Correspondence;
use crate::io::Raster;
use crate::matching::RegionMatch;
use crate::regions::RegionMap;

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("no eligible pixels for strategy {0}")]
    NoEligiblePixels(String),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
}

pub type Result<T> = std::result::Result<T, SamplingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Random,
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatcherKind {
    Exact,
    Region,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub sampler: SamplerKind,
    pub matcher: MatcherKind,
    /// |S|: requested pixel-pairs per batch.
    pub pairs_per_batch: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn strategy_name(sampler: SamplerKind, matcher: MatcherKind) -> &'static str {
        match (sampler, matcher) {
            (SamplerKind::Random, MatcherKind::Exact) => "random-exact",
            (SamplerKind::Random, MatcherKind::Region) => "random-region",
            (SamplerKind::Balanced, MatcherKind::Exact) => "balanced-exact",
            (SamplerKind::Balanced, MatcherKind::Region) => "balanced-region",
        }
    }

    pub fn parse_strategy(name: &str) -> Result<(SamplerKind, MatcherKind)> {
        match name {
            "random-exact" => Ok((SamplerKind::Random, MatcherKind::Exact)),
            "random-region" => Ok((SamplerKind::Random, MatcherKind::Region)),
            "balanced-exact" => Ok((SamplerKind::Balanced, MatcherKind::Exact)),
            "balanced-region" => Ok((SamplerKind::Balanced, MatcherKind::Region)),
            other => Err(SamplingError::UnknownStrategy(other.to_string())),
        }
    }

    pub fn strategy(&self) -> &'static str {
        Self::strategy_name(self.sampler, self.matcher)
    }
}

/// Affine original-to-augmented coordinate map defined by a resized crop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropMap {
    pub top: u32,
    pub left: u32,
    pub crop_h: u32,
    pub crop_w: u32,
    pub out_h: u32,
    pub out_w: u32,
}

impl CropMap {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            crop_h: h as u32,
            crop_w: w as u32,
            out_h: h as u32,
            out_w: w as u32,
        }
    }

    /// Original (row, col) to augmented continuous coordinates.
    #[inline]
    pub fn forward(&self, row: f64, col: f64) -> (f64, f64) {
        (
            (row - self.top as f64) * self.out_h as f64 / self.crop_h as f64,
            (col - self.left as f64) * self.out_w as f64 / self.crop_w as f64,
        )
    }

    /// Augmented to original continuous coordinates.
    #[inline]
    pub fn inverse(&self, row: f64, col: f64) -> (f64, f64) {
        (
            row * self.crop_h as f64 / self.out_h as f64 + self.top as f64,
            col * self.crop_w as f64 / self.out_w as f64 + self.left as f64,
        )
    }

    /// Maps an original integer pixel to the nearest augmented pixel, or
    /// None when it falls outside the crop.
    pub fn map_pixel(&self, row: u32, col: u32) -> Option<(u16, u16)> {
        let (r, c) = self.forward(row as f64, col as f64);
        let (r, c) = (r.round(), c.round());
        if r < 0.0 || c < 0.0 || r >= self.out_h as f64 || c >= self.out_w as f64 {
            return None;
        }
        Some((r as u16, c as u16))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub p: f64,
}

/// Augmentation recipe. The crop is geometric (it defines the coordinate
/// map); all other operations are photometric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentProfile {
    pub crop_size: usize,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub color_jitter: Option<ColorJitter>,
    pub grayscale_p: f64,
    pub blur_p: f64,
}

impl AugmentProfile {
    pub fn strong(crop_size: usize) -> Self {
        Self {
            crop_size,
            crop_scale: (0.08, 1.0),
            crop_ratio: (0.75, 1.25),
            color_jitter: Some(ColorJitter {
                brightness: 0.3,
                contrast: 0.3,
                saturation: 0.3,
                hue: 0.15,
                p: 0.8,
            }),
            grayscale_p: 0.2,
            blur_p: 0.5,
        }
    }

    /// Strong profile with the wider crop scale used for datasets with
    /// depth holes along the image edges.
    pub fn strong_wide_crop(crop_size: usize) -> Self {
        Self { crop_scale: (0.5, 1.0), ..Self::strong(crop_size) }
    }

    pub fn weak(crop_size: usize) -> Self {
        Self {
            crop_size,
            crop_scale: (0.9, 1.0),
            crop_ratio: (0.75, 1.25),
            color_jitter: None,
            grayscale_p: 0.0,
            blur_p: 0.0,
        }
    }

    /// Full-image crop with no photometric ops; the coordinate map is a
    /// pure uniform scaling for square inputs.
    pub fn identity(crop_size: usize) -> Self {
        Self {
            crop_size,
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            color_jitter: None,
            grayscale_p: 0.0,
            blur_p: 0.0,
        }
    }
}

/// An augmented view plus the coordinate map that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub rgb: Raster<[u8; 3]>,
    pub map: CropMap,
}

fn sample_crop(h: usize, w: usize, profile: &AugmentProfile, rng: &mut ChaCha8Rng) -> CropMap {
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * rng.gen_range(profile.crop_scale.0..=profile.crop_scale.1);
        let aspect = (rng.gen_range(profile.crop_ratio.0.ln()..=profile.crop_ratio.1.ln())).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=(h - ch)) as u32;
            let left = rng.gen_range(0..=(w - cw)) as u32;
            return CropMap {
                top,
                left,
                crop_h: ch as u32,
                crop_w: cw as u32,
                out_h: profile.crop_size as u32,
                out_w: profile.crop_size as u32,
            };
        }
    }
    // Fallback: centered crop of the largest in-ratio size.
    let side = h.min(w) as u32;
    CropMap {
        top: (h as u32 - side) / 2,
        left: (w as u32 - side) / 2,
        crop_h: side,
        crop_w: side,
        out_h: profile.crop_size as u32,
        out_w: profile.crop_size as u32,
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

fn luma(px: [f64; 3]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Applies the profile's random resized crop and photometric ops.
/// Deterministic for a fixed RNG state.
pub fn augment(rgb: &Raster<[u8; 3]>, profile: &AugmentProfile, rng: &mut ChaCha8Rng) -> AugmentedView {
    let map = sample_crop(rgb.height(), rgb.width(), profile, rng);

    // Nearest-neighbor resample of the crop to the output size.
    let (out_h, out_w) = (map.out_h as usize, map.out_w as usize);
    let mut img = vec![[0.0f64; 3]; out_h * out_w];
    for r in 0..out_h {
        for c in 0..out_w {
            let src_r = map.top as usize
                + (((r as f64 + 0.5) * map.crop_h as f64 / out_h as f64) as usize)
                    .min(map.crop_h as usize - 1);
            let src_c = map.left as usize
                + (((c as f64 + 0.5) * map.crop_w as f64 / out_w as f64) as usize)
                    .min(map.crop_w as usize - 1);
            let px = rgb.get(src_r, src_c);
            img[r * out_w + c] = [px[0] as f64 / 255.0, px[1] as f64 / 255.0, px[2] as f64 / 255.0];
        }
    }

    if let Some(jitter) = &profile.color_jitter {
        if rng.gen_bool(jitter.p) {
            let b = rng.gen_range((1.0 - jitter.brightness).max(0.0)..=1.0 + jitter.brightness);
            let c = rng.gen_range((1.0 - jitter.contrast).max(0.0)..=1.0 + jitter.contrast);
            let s = rng.gen_range((1.0 - jitter.saturation).max(0.0)..=1.0 + jitter.saturation);
            let h = rng.gen_range(-jitter.hue..=jitter.hue);
            let mean = img.iter().map(|&px| luma(px)).sum::<f64>() / img.len() as f64;
            for px in &mut img {
                for ch in px.iter_mut() {
                    *ch = (*ch * b).clamp(0.0, 1.0);
                }
                for ch in px.iter_mut() {
                    *ch = (mean + (*ch - mean) * c).clamp(0.0, 1.0);
                }
                let gray = luma(*px);
                for ch in px.iter_mut() {
                    *ch = (gray + (*ch - gray) * s).clamp(0.0, 1.0);
                }
                let (hh, ss, vv) = rgb_to_hsv(px[0], px[1], px[2]);
                let (r2, g2, b2) = hsv_to_rgb(hh + h, ss, vv);
                *px = [r2, g2, b2];
            }
        }
    }

    if profile.grayscale_p > 0.0 && rng.gen_bool(profile.grayscale_p) {
        for px in &mut img {
            let gray = luma(*px);
            *px = [gray, gray, gray];
        }
    }

    if profile.blur_p > 0.0 && rng.gen_bool(profile.blur_p) {
        let sigma: f64 = rng.gen_range(0.1..=2.0);
        let radius = (sigma * 3.0).ceil() as i64;
        let mut kernel: Vec<f64> =
            (-radius..=radius).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
        let norm: f64 = kernel.iter().sum();
        for k in &mut kernel {
            *k /= norm;
        }
        let mut tmp = img.clone();
        for r in 0..out_h {
            for c in 0..out_w {
                let mut acc = [0.0; 3];
                for (ki, k) in kernel.iter().enumerate() {
                    let cc = (c as i64 + ki as i64 - radius).clamp(0, out_w as i64 - 1) as usize;
                    for ch in 0..3 {
                        acc[ch] += k * img[r * out_w + cc][ch];
                    }
                }
                tmp[r * out_w + c] = acc;
            }
        }
        for r in 0..out_h {
            for c in 0..out_w {
                let mut acc = [0.0; 3];
                for (ki, k) in kernel.iter().enumerate() {
                    let rr = (r as i64 + ki as i64 - radius).clamp(0, out_h as i64 - 1) as usize;
                    for ch in 0..3 {
                        acc[ch] += k * tmp[rr * out_w + c][ch];
                    }
                }
                img[r * out_w + c] = acc;
            }
        }
    }

    let data = img
        .iter()
        .map(|px| px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    AugmentedView { rgb: Raster::from_vec(out_w, out_h, data), map }
}

/// One pair in augmented coordinates: `p` in view 1, `q` in view 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelPair {
    pub p: (u16, u16),
    pub q: (u16, u16),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub id1: String,
    pub id2: String,
    pub strategy: String,
    /// Requested |S|; `pairs.len()` may be smaller when crops destroy
    /// correspondences or the pair supply is exhausted.
    pub requested: u32,
    pub pairs: Vec<PixelPair>,
}

/// Everything a strategy may need to build a batch for one view pair.
pub struct PairSampleContext<'a> {
    pub id1: &'a str,
    pub id2: &'a str,
    pub correspondences: &'a [Correspondence],
    pub regmap1: &'a RegionMap,
    pub regmap2: &'a RegionMap,
    pub matches: &'a [RegionMatch],
    pub map1: &'a CropMap,
    pub map2: &'a CropMap,
}

const RESAMPLE_RETRIES: usize = 10;

fn index_to_coord(map: &RegionMap, index: u32) -> (u32, u32) {
    let w = map.labels.width() as u32;
    (index / w, index % w)
}

/// Exact count of distinct admissible pairs for a matcher: the
/// correspondence count for `exact`, the sum of matched-region size
/// products for `region`.
pub fn pair_supply_size(ctx: &PairSampleContext, matcher: MatcherKind) -> u64 {
    match matcher {
        MatcherKind::Exact => ctx.correspondences.len() as u64,
        MatcherKind::Region => ctx
            .matches
            .iter()
            .map(|m| ctx.regmap1.sizes[m.u as usize] * ctx.regmap2.sizes[m.v as usize])
            .sum(),
    }
}

pub fn sample_pair_batch(
    ctx: &PairSampleContext,
    cfg: &SamplingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    let strategy = cfg.strategy();
    let no_pixels = || SamplingError::NoEligiblePixels(strategy.to_string());

    // Eligible draws, grouped by the estimated region of p. For the exact
    // matcher, eligibility means "has a correspondence"; for the region
    // matcher, "lies in a matched region".
    // Each group entry is (p, q-source): q fixed for exact, a region's
    // pixel list for region matching.
    let match_for_u: HashMap<u32, u32> = ctx.matches.iter().map(|m| (m.u, m.v)).collect();
    let pixels2 = ctx.regmap2.pixels_by_region();

    // region label -> indices into correspondences (exact) or pixel
    // indices of regmap1 (region matching).
    let mut groups: Vec<(u32, Vec<u32>)> = match cfg.matcher {
        MatcherKind::Exact => {
            let mut by_region: HashMap<u32, Vec<u32>> = HashMap::new();
            for (i, corr) in ctx.correspondences.iter().enumerate() {
                let region = ctx.regmap1.labels.get(corr.p.0 as usize, corr.p.1 as usize);
                by_region.entry(region).or_default().push(i as u32);
            }
            by_region.into_iter().collect()
        }
        MatcherKind::Region => {
            let pixels1 = ctx.regmap1.pixels_by_region();
            ctx.matches
                .iter()
                .filter(|m| !pixels2[m.v as usize].is_empty())
                .map(|m| (m.u, pixels1[m.u as usize].clone()))
                .collect()
        }
    };
    groups.sort_by_key(|(label, _)| *label);
    groups.retain(|(_, items)| !items.is_empty());
    if groups.is_empty() {
        return Err(no_pixels());
    }

    let draw_q = |corr_or_pixel: u32, region_u: u32, rng: &mut ChaCha8Rng| -> ((u32, u32), (u32, u32)) {
        match cfg.matcher {
            MatcherKind::Exact => {
                let corr = &ctx.correspondences[corr_or_pixel as usize];
                (corr.p, corr.q)
            }
            MatcherKind::Region => {
                let p = index_to_coord(ctx.regmap1, corr_or_pixel);
                let v = match_for_u[&region_u];
                let candidates = &pixels2[v as usize];
                let q = index_to_coord(ctx.regmap2, candidates[rng.gen_range(0..candidates.len())]);
                (p, q)
            }
        }
    };

    let try_emit = |p: (u32, u32), q: (u32, u32)| -> Option<PixelPair> {
        let p_aug = ctx.map1.map_pixel(p.0, p.1)?;
        let q_aug = ctx.map2.map_pixel(q.0, q.1)?;
        Some(PixelPair { p: p_aug, q: q_aug })
    };

    let mut pairs = Vec::with_capacity(cfg.pairs_per_batch);
    match cfg.sampler {
        SamplerKind::Random => {
            let total: u64 = groups.iter().map(|(_, items)| items.len() as u64).sum();
            for _ in 0..cfg.pairs_per_batch {
                for _attempt in 0..RESAMPLE_RETRIES {
                    let mut k = rng.gen_range(0..total);
                    let (region, items) = groups
                        .iter()
                        .find(|(_, items)| {
                            if k < items.len() as u64 {
                                true
                            } else {
                                k -= items.len() as u64;
                                false
                            }
                        })
                        .expect("k < total");
                    let (p, q) = draw_q(items[k as usize], *region, rng);
                    if let Some(pair) = try_emit(p, q) {
                        pairs.push(pair);
                        break;
                    }
                }
            }
        }
        SamplerKind::Balanced => {
            // Per-region quotas differ by at most one; regions smaller
            // than their quota are sampled with replacement.
            let k = groups.len();
            let base = cfg.pairs_per_batch / k;
            let remainder = cfg.pairs_per_batch % k;
            for (gi, (region, items)) in groups.iter().enumerate() {
                let quota = base + usize::from(gi < remainder);
                for _ in 0..quota {
                    for _attempt in 0..RESAMPLE_RETRIES {
                        let pick = items[rng.gen_range(0..items.len())];
                        let (p, q) = draw_q(pick, *region, rng);
                        if let Some(pair) = try_emit(p, q) {
                            pairs.push(pair);
                            break;
                        }
                    }
                }
            }
        }
    }

    Ok(PairBatch {
        id1: ctx.id1.to_string(),
        id2: ctx.id2.to_string(),
        strategy: strategy.to_string(),
        requested: cfg.pairs_per_batch as u32,
        pairs,
    })
}
