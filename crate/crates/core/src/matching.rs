//! Cross-view region matching.
//!
//! Region labels of view 1 are warped into view 2's pixel grid via depth
//! reprojection with z-buffer collision resolution. Region-pair
//! intersections are then counted in a single pass by histogramming the
//! Cantor pairing of (warped label, view-2 label), so the table size is
//! the number of actually-overlapping region pairs.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::geometry::{passes_occlusion, project_pixel};
use crate::io::{Frame, Raster};
use crate::regions::RegionMap;

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("cantor pairing of ({0}, {1}) overflows u64")]
    CantorOverflow(u64, u64),
    #[error("dimension mismatch: warped map is {0}x{1}, region map is {2}x{3}")]
    Dimensions(usize, usize, usize, usize),
}

pub type Result<T> = std::result::Result<T, MatchError>;

/// Hole marker in warped label rasters; never a valid dense region label.
pub const WARP_HOLE: u32 = u32::MAX;

/// Cantor pairing: `(k1 + k2)(k1 + k2 + 1)/2 + k2`, a bijection from
/// pairs of non-negative integers.
pub fn cantor_pair(k1: u64, k2: u64) -> Result<u64> {
    let s = (k1 as u128) + (k2 as u128);
    let paired = s
        .checked_mul(s + 1)
        .map(|v| v / 2 + k2 as u128)
        .ok_or(MatchError::CantorOverflow(k1, k2))?;
    u64::try_from(paired).map_err(|_| MatchError::CantorOverflow(k1, k2))
}

/// Exact inverse of [`cantor_pair`].
pub fn cantor_unpair(n: u64) -> (u64, u64) {
    // s = floor((sqrt(8n + 1) - 1) / 2), computed exactly via integer sqrt.
    let m = 8u128 * n as u128 + 1;
    let mut root = (m as f64).sqrt() as u128;
    while root * root > m {
        root -= 1;
    }
    while (root + 1) * (root + 1) <= m {
        root += 1;
    }
    let s = (root - 1) / 2;
    // Triangular number in u128: s*(s+1) can exceed u64 near the top of
    // the pairing range.
    let k2 = (n as u128 - s * (s + 1) / 2) as u64;
    (s as u64 - k2, k2)
}

/// Transports view-1 region labels into view-2's pixel grid. Collisions
/// keep the projection with the smaller camera-2 depth; unprojectable,
/// occluded and uncovered pixels hold [`WARP_HOLE`].
pub fn warp_region_map(
    regmap1: &RegionMap,
    frame1: &Frame,
    frame2: &Frame,
    epsilon_rel: f64,
) -> Raster<u32> {
    assert!(
        regmap1.labels.same_shape(&frame1.depth),
        "region map dimensions must match frame1"
    );
    let cam = frame1.camera.cast::<f64>();
    let (w, h) = (frame2.depth.width(), frame2.depth.height());
    let mut out = Raster::new(w, h, WARP_HOLE);
    let mut zbuf = Raster::new(w, h, f64::INFINITY);
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
            if !passes_occlusion(proj.depth, observed, epsilon_rel) {
                continue;
            }
            if proj.depth < zbuf.get(qr, qc) {
                zbuf.set(qr, qc, proj.depth);
                out.set(qr, qc, regmap1.labels.get(row, col));
            }
        }
    }
    out
}

/// One overlapping region pair: `u` from the warped view-1 map, `v` from
/// the view-2 map. `size_u` counts u over the warped map's non-hole
/// support, `size_v` counts v over the full view-2 map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionIoUEntry {
    pub u: u32,
    pub v: u32,
    pub intersection: u64,
    pub size_u: u64,
    pub size_v: u64,
    pub iou: f64,
}

impl RegionIoUEntry {
    pub fn union(&self) -> u64 {
        self.size_u + self.size_v - self.intersection
    }
}

/// Operation counts for the complexity property: work is linear in pixel
/// count plus the number of overlapping region pairs.
#[derive(Debug, Clone, Copy, Default)]
pub struct IoUTableOps {
    pub pixel_visits: u64,
    pub pair_entries: u64,
}

/// Single-pass region-pair IoU table via Cantor-pair histogramming.
/// Entries are sorted by (u, v); only pairs with positive intersection
/// appear.
pub fn region_iou_table(warped_u: &Raster<u32>, regmap_v: &RegionMap) -> Result<Vec<RegionIoUEntry>> {
    Ok(region_iou_table_counted(warped_u, regmap_v)?.0)
}

pub fn region_iou_table_counted(
    warped_u: &Raster<u32>,
    regmap_v: &RegionMap,
) -> Result<(Vec<RegionIoUEntry>, IoUTableOps)> {
    if !warped_u.same_shape(&regmap_v.labels) {
        return Err(MatchError::Dimensions(
            warped_u.width(),
            warped_u.height(),
            regmap_v.labels.width(),
            regmap_v.labels.height(),
        ));
    }
    let mut ops = IoUTableOps::default();
    let mut intersections: HashMap<u64, u64> = HashMap::new();
    let mut u_support: HashMap<u32, u64> = HashMap::new();
    for (&u, &v) in warped_u.data().iter().zip(regmap_v.labels.data()) {
        ops.pixel_visits += 1;
        if u == WARP_HOLE {
            continue;
        }
        *intersections.entry(cantor_pair(u as u64, v as u64)?).or_insert(0) += 1;
        *u_support.entry(u).or_insert(0) += 1;
    }

    let mut table = Vec::with_capacity(intersections.len());
    for (&code, &intersection) in &intersections {
        ops.pair_entries += 1;
        let (u, v) = cantor_unpair(code);
        let (u, v) = (u as u32, v as u32);
        let size_u = u_support[&u];
        let size_v = regmap_v.sizes[v as usize];
        let union = size_u + size_v - intersection;
        table.push(RegionIoUEntry {
            u,
            v,
            intersection,
            size_u,
            size_v,
            iou: intersection as f64 / union as f64,
        });
    }
    table.sort_by_key(|e| (e.u, e.v));
    Ok((table, ops))
}

/// A matched region pair surviving mutual-best filtering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionMatch {
    pub u: u32,
    pub v: u32,
    pub iou: f64,
}

/// Exact IoU comparison via cross-multiplication; ties prefer the smaller
/// counterpart label.
fn better(candidate: &RegionIoUEntry, incumbent: &RegionIoUEntry, by_v: bool) -> bool {
    let lhs = candidate.intersection as u128 * incumbent.union() as u128;
    let rhs = incumbent.intersection as u128 * candidate.union() as u128;
    if lhs != rhs {
        return lhs > rhs;
    }
    if by_v {
        candidate.u < incumbent.u
    } else {
        candidate.v < incumbent.v
    }
}

/// Keeps (u, v) iff each is the other's best-IoU partner and the IoU
/// reaches `tau_region`. The result is a partial one-to-one matching.
pub fn match_regions(table: &[RegionIoUEntry], tau_region: f64) -> Vec<RegionMatch> {
    assert!(tau_region > 0.0 && tau_region <= 1.0, "tau_region must be in (0, 1]");
    let mut best_for_u: HashMap<u32, &RegionIoUEntry> = HashMap::new();
    let mut best_for_v: HashMap<u32, &RegionIoUEntry> = HashMap::new();
    for entry in table {
        if best_for_u.get(&entry.u).is_none_or(|inc| better(entry, inc, false)) {
            best_for_u.insert(entry.u, entry);
        }
        if best_for_v.get(&entry.v).is_none_or(|inc| better(entry, inc, true)) {
            best_for_v.insert(entry.v, entry);
        }
    }
    let mut matches: Vec<RegionMatch> = best_for_u
        .values()
        .filter(|e| {
            e.iou >= tau_region && best_for_v.get(&e.v).is_some_and(|b| (b.u, b.v) == (e.u, e.v))
        })
        .map(|e| RegionMatch { u: e.u, v: e.v, iou: e.iou })
        .collect();
    matches.sort_by_key(|m| (m.u, m.v));
    matches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Raster;
    use crate::regions::RegionMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force O(|R1| * |R2|) mask intersection; the oracle for the
    /// single-pass table.
    pub(crate) fn brute_force_table(
        warped: &Raster<u32>,
        regmap: &RegionMap,
    ) -> Vec<RegionIoUEntry> {
        let mut u_labels: Vec<u32> =
            warped.data().iter().copied().filter(|&u| u != WARP_HOLE).collect();
        u_labels.sort_unstable();
        u_labels.dedup();
        let mut table = Vec::new();
        for &u in &u_labels {
            let size_u = warped.data().iter().filter(|&&x| x == u).count() as u64;
            for v in 0..regmap.count {
                let intersection = warped
                    .data()
                    .iter()
                    .zip(regmap.labels.data())
                    .filter(|&(&x, &y)| x == u && y == v)
                    .count() as u64;
                if intersection == 0 {
                    continue;
                }
                let size_v = regmap.sizes[v as usize];
                let union = size_u + size_v - intersection;
                table.push(RegionIoUEntry {
                    u,
                    v,
                    intersection,
                    size_u,
                    size_v,
                    iou: intersection as f64 / union as f64,
                });
            }
        }
        table
    }

    pub(crate) fn random_region_map(rng: &mut ChaCha8Rng, w: usize, h: usize, max_regions: u32) -> RegionMap {
        let k = rng.gen_range(1..=max_regions);
        let raw: Vec<u16> = (0..w * h).map(|_| rng.gen_range(0..k) as u16).collect();
        RegionMap::from_label_raster(&Raster::from_vec(w, h, raw))
    }

    #[test]
    fn cantor_closed_form_values() {
        assert_eq!(cantor_pair(0, 0).unwrap(), 0);
        assert_eq!(cantor_pair(1, 1).unwrap(), 4);
        assert_eq!(cantor_pair(0, 1).unwrap(), 2);
        assert_eq!(cantor_pair(1, 0).unwrap(), 1);
    }

    #[test]
    fn cantor_overflow_reports_inputs() {
        let err = cantor_pair(u64::MAX, u64::MAX).unwrap_err();
        assert!(err.to_string().contains(&u64::MAX.to_string()));
    }

    #[test]
    fn cantor_unpair_inverts_large_values() {
        for &(k1, k2) in &[(0u64, 0u64), (1, 2), (123456, 654321), (1 << 30, 1 << 29)] {
            assert_eq!(cantor_unpair(cantor_pair(k1, k2).unwrap()), (k1, k2));
        }
    }

    #[test]
    fn cantor_is_monotone_in_sum() {
        let mut prev = None;
        for s in 0..100u64 {
            for k2 in 0..=s {
                let n = cantor_pair(s - k2, k2).unwrap();
                if let Some(p) = prev {
                    assert_eq!(n, p + 1, "pairing must enumerate diagonals consecutively");
                }
                prev = Some(n);
            }
        }
    }

    #[test]
    fn worked_2x2_example() {
        // U = [[1,1],[1,2]], V = [[1,1],[2,2]]
        let warped = Raster::from_vec(2, 2, vec![1u32, 1, 1, 2]);
        let regmap = RegionMap {
            labels: Raster::from_vec(2, 2, vec![1u32, 1, 2, 2]),
            count: 3,
            sizes: vec![0, 2, 2],
        };
        let table = region_iou_table(&warped, &regmap).unwrap();
        let expect = [(1u32, 1u32, 2u64, 2.0 / 3.0), (1, 2, 1, 0.25), (2, 2, 1, 0.5)];
        assert_eq!(table.len(), 3);
        for (entry, (u, v, inter, iou)) in table.iter().zip(expect) {
            assert_eq!((entry.u, entry.v, entry.intersection), (u, v, inter));
            assert!((entry.iou - iou).abs() < 1e-15);
        }

        // tau = 1.0 excludes everything (max IoU is 2/3).
        assert!(match_regions(&table, 1.0).is_empty());
    }

    #[test]
    fn identical_maps_self_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = random_region_map(&mut rng, 8, 8, 5);
        let warped = map.labels.clone();
        let table = region_iou_table(&warped, &map).unwrap();
        assert_eq!(table.len(), map.count as usize);
        for e in &table {
            assert_eq!(e.u, e.v);
            assert_eq!(e.iou, 1.0);
        }
        let matches = match_regions(&table, 0.5);
        assert_eq!(matches.len(), map.count as usize);
    }

    #[test]
    fn all_hole_warp_gives_empty_table() {
        let warped = Raster::new(4, 4, WARP_HOLE);
        let map = RegionMap {
            labels: Raster::new(4, 4, 0u32),
            count: 1,
            sizes: vec![16],
        };
        assert!(region_iou_table(&warped, &map).unwrap().is_empty());
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let warped = Raster::new(3, 4, WARP_HOLE);
        let map = RegionMap { labels: Raster::new(4, 4, 0u32), count: 1, sizes: vec![16] };
        assert!(matches!(region_iou_table(&warped, &map), Err(MatchError::Dimensions(..))));
    }

    #[test]
    fn table_matches_brute_force_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let w = rng.gen_range(1..32);
            let h = rng.gen_range(1..32);
            let map_v = random_region_map(&mut rng, w, h, 8);
            let mut warped = random_region_map(&mut rng, w, h, 8).labels;
            for x in warped.data_mut() {
                if rng.gen_bool(0.2) {
                    *x = WARP_HOLE;
                }
            }
            let fast = region_iou_table(&warped, &map_v).unwrap();
            let brute = brute_force_table(&warped, &map_v);
            assert_eq!(fast.len(), brute.len());
            for (f, b) in fast.iter().zip(&brute) {
                assert_eq!((f.u, f.v, f.intersection, f.size_u, f.size_v),
                           (b.u, b.v, b.intersection, b.size_u, b.size_v));
                // Exact rational comparison via cross-multiplication.
                assert_eq!(f.intersection as u128 * b.union() as u128,
                           b.intersection as u128 * f.union() as u128);
            }
        }
    }

    #[test]
    fn matching_is_one_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let map_v = random_region_map(&mut rng, 16, 16, 10);
            let warped = random_region_map(&mut rng, 16, 16, 10).labels;
            let table = region_iou_table(&warped, &map_v).unwrap();
            let matches = match_regions(&table, 0.05);
            let mut us: Vec<u32> = matches.iter().map(|m| m.u).collect();
            let mut vs: Vec<u32> = matches.iter().map(|m| m.v).collect();
            us.sort_unstable();
            vs.sort_unstable();
            us.dedup();
            vs.dedup();
            assert_eq!(us.len(), matches.len());
            assert_eq!(vs.len(), matches.len());
            assert!(matches.iter().all(|m| m.iou >= 0.05));
        }
    }

    #[test]
    fn table_work_is_linear_in_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // Fixed region count, growing image: pair entries stay bounded by
        // k^2 while pixel visits scale with area.
        let mut per_pixel = Vec::new();
        for dim in [16usize, 32, 64] {
            let map_v = random_region_map(&mut rng, dim, dim, 4);
            let warped = random_region_map(&mut rng, dim, dim, 4).labels;
            let (_, ops) = region_iou_table_counted(&warped, &map_v).unwrap();
            assert!(ops.pair_entries <= 16);
            per_pixel.push(ops.pixel_visits as f64 / (dim * dim) as f64);
        }
        for window in per_pixel.windows(2) {
            assert!((window[0] - window[1]).abs() < 1e-9, "work per pixel must be constant");
        }
    }
}
