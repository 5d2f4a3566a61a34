//! Unsupervised region estimation: graph-based segmentation on the
//! 8-connected pixel grid with union-find merging.
//!
//! The merge threshold for a component C is `scale / |C|`; an edge joins
//! two components when its weight does not exceed the smaller of the two
//! internal differences plus their thresholds. Components below
//! `min_size` are merged into a neighbor in a final pass.
//!
//! The `sigma` parameter has two declared modes. `Blur` treats it as a
//! standard Gaussian pre-smoothing sigma in pixels (default 0.8). `Raw`
//! records the configured value but applies no preprocessing, for ports
//! that define their own preprocessor scale.

use serde::{Deserialize, Serialize};

use crate::io::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    #[default]
    Blur,
    Raw,
}

/// Dense per-pixel region labels `0..count`, with a region-size table.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub labels: Raster<u32>,
    pub count: u32,
    pub sizes: Vec<u64>,
}

impl RegionMap {
    /// Builds a region map directly from a label raster (e.g. ground-truth
    /// class labels standing in for estimated regions). Distinct raster
    /// values become regions, densely relabeled in scanline-first-occurrence
    /// order. Regions built this way need not be connected.
    pub fn from_label_raster(labels: &Raster<u16>) -> Self {
        let mut remap = std::collections::HashMap::new();
        let mut sizes = Vec::new();
        let mut out = Raster::new(labels.width(), labels.height(), 0u32);
        for (i, &l) in labels.data().iter().enumerate() {
            let next = remap.len() as u32;
            let dense = *remap.entry(l).or_insert_with(|| {
                sizes.push(0u64);
                next
            });
            sizes[dense as usize] += 1;
            out.data_mut()[i] = dense;
        }
        RegionMap { labels: out, count: remap.len() as u32, sizes }
    }

    /// Pixels in every region; indices are `row * width + col`.
    pub fn pixels_by_region(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.count as usize];
        for (i, &l) in self.labels.data().iter().enumerate() {
            out[l as usize].push(i as u32);
        }
        out
    }
}

/// Pixel-count table per region label; sums to the total pixel count.
pub fn region_sizes(map: &RegionMap) -> Vec<u64> {
    let mut sizes = vec![0u64; map.count as usize];
    for &l in map.labels.data() {
        sizes[l as usize] += 1;
    }
    sizes
}

struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
    /// Internal difference: max edge weight in the component's MST so far.
    int_diff: Vec<f64>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n as u32).collect(), size: vec![1; n], int_diff: vec![0.0; n] }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            self.parent[x as usize] = self.parent[self.parent[x as usize] as usize];
            x = self.parent[x as usize];
        }
        x
    }

    fn union(&mut self, a: u32, b: u32, weight: f64) -> u32 {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] { (a, b) } else { (b, a) };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        self.int_diff[big as usize] = weight;
        big
    }
}

fn gaussian_blur(channel: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return channel.to_vec();
    }
    let radius = (sigma * 4.0).ceil() as i64;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }

    let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut horiz = vec![0.0; channel.len()];
    for row in 0..height {
        for col in 0..width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let c = clamp(col as i64 + ki as i64 - radius, width);
                acc += k * channel[row * width + c];
            }
            horiz[row * width + col] = acc;
        }
    }
    let mut out = vec![0.0; channel.len()];
    for row in 0..height {
        for col in 0..width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let r = clamp(row as i64 + ki as i64 - radius, height);
                acc += k * horiz[r * width + col];
            }
            out[row * width + col] = acc;
        }
    }
    out
}

/// Graph-based segmentation of an RGB raster.
///
/// Edge weights are Euclidean RGB distances on the (optionally smoothed)
/// image; ties break by (weight, source, target) so the output is
/// deterministic. Labels are dense, in scanline-first-occurrence order.
pub fn segment_graph(
    rgb: &Raster<[u8; 3]>,
    scale: f64,
    sigma: f64,
    sigma_mode: SigmaMode,
    min_size: usize,
) -> RegionMap {
    assert!(!rgb.is_empty(), "rgb raster must be non-empty");
    assert!(scale > 0.0, "scale must be positive");
    assert!(sigma >= 0.0, "sigma must be non-negative");
    assert!(min_size >= 1, "min_size must be at least 1");

    let (w, h) = (rgb.width(), rgb.height());
    let n = w * h;

    let mut channels = [vec![0.0f64; n], vec![0.0; n], vec![0.0; n]];
    for (i, px) in rgb.data().iter().enumerate() {
        for c in 0..3 {
            channels[c][i] = px[c] as f64;
        }
    }
    if matches!(sigma_mode, SigmaMode::Blur) {
        for ch in &mut channels {
            *ch = gaussian_blur(ch, w, h, sigma);
        }
    }

    let weight = |a: usize, b: usize| -> f64 {
        channels.iter().map(|ch| (ch[a] - ch[b]).powi(2)).sum::<f64>().sqrt()
    };

    // 8-connected grid edges: right, down, down-right, down-left.
    let mut edges: Vec<(f64, u32, u32)> = Vec::with_capacity(4 * n);
    for row in 0..h {
        for col in 0..w {
            let a = row * w + col;
            if col + 1 < w {
                edges.push((weight(a, a + 1), a as u32, (a + 1) as u32));
            }
            if row + 1 < h {
                edges.push((weight(a, a + w), a as u32, (a + w) as u32));
                if col + 1 < w {
                    edges.push((weight(a, a + w + 1), a as u32, (a + w + 1) as u32));
                }
                if col > 0 {
                    edges.push((weight(a, a + w - 1), a as u32, (a + w - 1) as u32));
                }
            }
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));

    let mut uf = UnionFind::new(n);
    for &(wgt, a, b) in &edges {
        let ra = uf.find(a);
        let rb = uf.find(b);
        if ra == rb {
            continue;
        }
        let thr_a = uf.int_diff[ra as usize] + scale / uf.size[ra as usize] as f64;
        let thr_b = uf.int_diff[rb as usize] + scale / uf.size[rb as usize] as f64;
        if wgt <= thr_a.min(thr_b) {
            uf.union(ra, rb, wgt);
        }
    }

    // Post-process: absorb undersized components along the sorted edges.
    if min_size > 1 {
        for &(wgt, a, b) in &edges {
            let ra = uf.find(a);
            let rb = uf.find(b);
            if ra != rb
                && ((uf.size[ra as usize] as usize) < min_size
                    || (uf.size[rb as usize] as usize) < min_size)
            {
                uf.union(ra, rb, wgt);
            }
        }
    }

    // Dense relabel in scanline-first-occurrence order.
    let mut dense = std::collections::HashMap::new();
    let mut sizes = Vec::new();
    let mut labels = Raster::new(w, h, 0u32);
    for i in 0..n {
        let root = uf.find(i as u32);
        let next = dense.len() as u32;
        let label = *dense.entry(root).or_insert_with(|| {
            sizes.push(0u64);
            next
        });
        sizes[label as usize] += 1;
        labels.data_mut()[i] = label;
    }
    RegionMap { labels, count: dense.len() as u32, sizes }
}
