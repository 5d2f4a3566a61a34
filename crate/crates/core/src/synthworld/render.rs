//! Ray casting against axis-aligned boxes (slab method) with Lambertian
//! shading and a per-surface checker texture.

use crate::geometry::{CameraModel, Pose};
use crate::io::{Frame, Raster};

use super::{Aabb, Result, Scene, SynthError, CLASS_CEILING, CLASS_FLOOR, CLASS_WALL};

const T_EPS: f64 = 1e-9;

/// First surface a ray meets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Ray parameter of the hit; equals z-depth when the camera-frame ray
    /// direction has unit forward component.
    pub t: f64,
    pub point: [f64; 3],
    pub class: u16,
    /// Slab axis of the hit face.
    pub axis: usize,
    /// +1 for the max face, -1 for the min face.
    pub face: i8,
    /// Index into `scene.boxes`, or None for the room shell.
    pub box_index: Option<usize>,
}

struct SlabHit {
    t: f64,
    axis: usize,
    face: i8,
}

/// Slab intersection. From outside returns the entry face; from inside
/// (or when the entry lies behind the origin) the exit face.
fn intersect_aabb(aabb: &Aabb, origin: [f64; 3], dir: [f64; 3]) -> Option<SlabHit> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut enter = (0usize, 0i8);
    let mut exit = (0usize, 0i8);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < aabb.min[a] || origin[a] > aabb.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (t0, t1, f0, f1) = if inv > 0.0 {
            ((aabb.min[a] - origin[a]) * inv, (aabb.max[a] - origin[a]) * inv, -1i8, 1i8)
        } else {
            ((aabb.max[a] - origin[a]) * inv, (aabb.min[a] - origin[a]) * inv, 1i8, -1i8)
        };
        if t0 > t_enter {
            t_enter = t0;
            enter = (a, f0);
        }
        if t1 < t_exit {
            t_exit = t1;
            exit = (a, f1);
        }
    }
    if t_enter > t_exit || t_exit <= T_EPS {
        return None;
    }
    if t_enter > T_EPS {
        Some(SlabHit { t: t_enter, axis: enter.0, face: enter.1 })
    } else {
        Some(SlabHit { t: t_exit, axis: exit.0, face: exit.1 })
    }
}

/// Casts a world-space ray and returns the nearest surface. The origin is
/// expected to be inside the room shell, so the shell always terminates
/// the ray.
pub fn cast_ray(scene: &Scene, origin: [f64; 3], dir: [f64; 3]) -> Option<RayHit> {
    let mut best: Option<(f64, usize, i8, Option<usize>)> = None;
    for (i, sbox) in scene.boxes.iter().enumerate() {
        if let Some(hit) = intersect_aabb(&sbox.aabb, origin, dir) {
            if best.as_ref().is_none_or(|b| hit.t < b.0) {
                best = Some((hit.t, hit.axis, hit.face, Some(i)));
            }
        }
    }
    if best.is_none() {
        let shell = intersect_aabb(&scene.shell, origin, dir)?;
        best = Some((shell.t, shell.axis, shell.face, None));
    } else if let Some(shell) = intersect_aabb(&scene.shell, origin, dir) {
        if shell.t < best.as_ref().unwrap().0 {
            best = Some((shell.t, shell.axis, shell.face, None));
        }
    }
    let (t, axis, face, box_index) = best?;
    let point = [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]];
    let class = match box_index {
        Some(i) => scene.boxes[i].class,
        None => match (axis, face) {
            (2, -1) => CLASS_FLOOR,
            (2, 1) => CLASS_CEILING,
            _ => CLASS_WALL,
        },
    };
    Some(RayHit { t, point, class, axis, face, box_index })
}

fn shade(scene: &Scene, hit: &RayHit, view_dir: [f64; 3]) -> [u8; 3] {
    let (albedo, checker) = match hit.box_index {
        Some(i) => (scene.boxes[i].albedo, scene.boxes[i].checker),
        None => {
            let cell = match hit.class {
                CLASS_FLOOR => 0.5,
                CLASS_CEILING => 2.0,
                _ => 1.0,
            };
            (super::class_palette(hit.class), cell)
        }
    };

    // Outward face normal, flipped toward the viewer when seen from inside.
    let mut normal = [0.0; 3];
    normal[hit.axis] = hit.face as f64;
    let facing = (0..3).map(|a| normal[a] * view_dir[a]).sum::<f64>();
    if facing > 0.0 {
        normal[hit.axis] = -normal[hit.axis];
    }

    let ndotl = -(0..3).map(|a| normal[a] * scene.light_dir[a]).sum::<f64>();
    let lambert = 0.35 + 0.65 * ndotl.max(0.0);

    // Checker over the two in-face axes.
    let (u, v) = match hit.axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let parity = ((hit.point[u] / checker).floor() + (hit.point[v] / checker).floor()) as i64;
    let tex = if parity.rem_euclid(2) == 0 { 1.0 } else { 0.65 };

    albedo.map(|c| ((c * lambert * tex).clamp(0.0, 1.0) * 255.0).round() as u8)
}

/// Renders RGB, exact depth and class labels for one camera pose.
pub fn render_view(scene: &Scene, cam: &CameraModel<f64>, pose: &Pose<f64>) -> Result<Frame> {
    if !scene.shell.contains(pose.translation) {
        return Err(SynthError::PoseOutsideShell(pose.translation));
    }
    let (w, h) = (cam.width, cam.height);
    let mut rgb = Raster::new(w, h, [0u8; 3]);
    let mut depth = Raster::new(w, h, 0.0f32);
    let mut labels = Raster::new(w, h, 0u16);
    let origin = pose.translation;
    for row in 0..h {
        for col in 0..w {
            // Unit forward component: the hit parameter t is the z-depth.
            let dir_cam = [(col as f64 - cam.cx) / cam.fx, (row as f64 - cam.cy) / cam.fy, 1.0];
            let dir = pose.rotate_to_world(dir_cam);
            // Origin inside the shell: the shell always terminates the ray.
            let hit = cast_ray(scene, origin, dir).expect("ray must hit the shell");
            rgb.set(row, col, shade(scene, &hit, dir));
            depth.set(row, col, hit.t as f32);
            labels.set(row, col, hit.class);
        }
    }
    Ok(Frame {
        id: String::new(),
        rgb,
        depth,
        labels: Some(labels),
        pose: pose.clone(),
        camera: cam.clone(),
    })
}
