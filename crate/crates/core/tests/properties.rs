//! Randomized properties: round trips, bounds and invariants that must
//! hold for all inputs, not just the fixtures used elsewhere.

use proptest::prelude::*;

use regconsist::geometry::CameraModel;
use regconsist::matching::{cantor_pair, cantor_unpair};
use regconsist::sampling::CropMap;
use regconsist::ssl::{lr_at, Mat};
use regconsist::supervise::{focal_loss, split_labeled};
use regconsist::synthworld::pose_at;
use regconsist::IGNORE_LABEL;

proptest! {
    #[test]
    fn cantor_pair_then_unpair_is_identity(k1 in 0u64..1 << 31, k2 in 0u64..1 << 31) {
        let n = cantor_pair(k1, k2).unwrap();
        prop_assert_eq!(cantor_unpair(n), (k1, k2));
    }

    #[test]
    fn cantor_unpair_then_pair_is_identity(n in any::<u64>()) {
        let (k1, k2) = cantor_unpair(n);
        prop_assert_eq!(cantor_pair(k1, k2).unwrap(), n);
    }

    #[test]
    fn crop_map_inverse_undoes_forward(
        top in 0u32..64, left in 0u32..64,
        crop_h in 1u32..64, crop_w in 1u32..64,
        out_h in 1u32..128, out_w in 1u32..128,
        row in 0.0f64..128.0, col in 0.0f64..128.0,
    ) {
        let map = CropMap { top, left, crop_h, crop_w, out_h, out_w };
        let (ar, ac) = map.forward(row, col);
        let (br, bc) = map.inverse(ar, ac);
        prop_assert!((br - row).abs() < 1e-9 && (bc - col).abs() < 1e-9);
    }

    #[test]
    fn crop_map_pixel_lands_inside_the_output(
        top in 0u32..64, left in 0u32..64,
        crop_h in 1u32..64, crop_w in 1u32..64,
        out_h in 1u32..128, out_w in 1u32..128,
        row in 0u32..128, col in 0u32..128,
    ) {
        let map = CropMap { top, left, crop_h, crop_w, out_h, out_w };
        if let Some((r, c)) = map.map_pixel(row, col) {
            prop_assert!((r as u32) < out_h && (c as u32) < out_w);
        }
    }

    #[test]
    fn lr_schedule_stays_within_bounds(
        total in 2u64..5000, warmup in 0u64..100, base in 1e-4f64..1.0,
    ) {
        prop_assume!(warmup < total);
        for iter in 0..total {
            let lr = lr_at(iter, total, warmup, base);
            prop_assert!(lr > 0.0 && lr <= base * (1.0 + 1e-12));
        }
        let last = lr_at(total - 1, total, warmup, base);
        prop_assert!((last - base / 10.0).abs() <= base * 1e-9);
    }

    #[test]
    fn labeled_split_is_sorted_unique_and_nested(
        n in 2usize..400, seed in any::<u64>(),
        f1 in 0.01f64..1.0, f2 in 0.01f64..1.0,
    ) {
        let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
        let small = split_labeled(n, lo, seed).unwrap();
        let large = split_labeled(n, hi, seed).unwrap();
        prop_assert_eq!(small.len(), ((lo * n as f64).round() as usize).clamp(1, n));
        prop_assert!(small.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(small.iter().all(|&i| i < n));
        prop_assert!(small.iter().all(|i| large.contains(i)));
    }

    #[test]
    fn focal_loss_is_nonnegative_and_plain_ce_gradients_balance(
        rows in 1usize..8, cols in 2usize..6, seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let logits = Mat::from_vec(rows, cols, data);
        let targets: Vec<u16> = (0..rows).map(|_| rng.gen_range(0..cols) as u16).collect();
        for gamma in [0.0, 0.5, 2.0] {
            let (loss, grad) = focal_loss(&logits, &targets, gamma, IGNORE_LABEL).unwrap();
            prop_assert!(loss >= 0.0);
            if gamma == 0.0 {
                // Softmax cross-entropy: each row's gradient sums to zero.
                for r in 0..rows {
                    let s: f64 = grad.row(r).iter().sum();
                    prop_assert!(s.abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn projection_round_trips_through_the_camera(
        row in 0.0f64..480.0, col in 0.0f64..640.0, depth in 0.1f64..50.0,
    ) {
        let cam = CameraModel { fx: 320.0, fy: 320.0, cx: 320.0, cy: 240.0, width: 640, height: 480 };
        let p = cam.unproject(row, col, depth);
        prop_assert!((p[2] - depth).abs() < 1e-12);
        let (r, c) = cam.project(p);
        prop_assert!((r - row).abs() < 1e-9 && (c - col).abs() < 1e-9);
    }

    #[test]
    fn poses_are_rigid_and_invertible(
        x in -5.0f64..5.0, y in -5.0f64..5.0, z in 0.1f64..3.0,
        yaw in -10.0f64..10.0,
        px in -5.0f64..5.0, py in -5.0f64..5.0, pz in -5.0f64..5.0,
    ) {
        let pose = pose_at([x, y, z], yaw);
        prop_assert!(pose.is_proper_rotation(1e-9));
        let w = pose.cam_to_world([px, py, pz]);
        let back = pose.world_to_cam(w);
        prop_assert!((back[0] - px).abs() < 1e-9);
        prop_assert!((back[1] - py).abs() < 1e-9);
        prop_assert!((back[2] - pz).abs() < 1e-9);
    }
}
