//! Synthetic LiDAR scenes: ray casting against a ground plane and
//! axis-aligned boxes from two sensor poses, the desk-scale stand-in for
//! real drives.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::geometry::{
    euler_zyx_to_rotation, matrix_to_pose, PoseMatrix, Quaternion, Translation, Vec3,
};

/// Scene and motion parameters for one synthetic frame pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    /// Ray budget per frame; the ray grid is `ray_rows x (points / ray_rows)`.
    pub points_per_frame: usize,
    pub ray_rows: usize,
    /// Vertical ray fan in radians, `(min, max)` elevation.
    pub fov: (f64, f64),
    pub ground_plane: bool,
    pub static_boxes: usize,
    /// Adds one box that moves independently between the frames.
    pub dynamic_box: bool,
    /// Dynamic-box translation magnitude as a multiple of the sensor motion.
    pub dynamic_motion_scale: f64,
    /// Per-axis sensor rotation range, degrees (uniform in +-range).
    pub rot_range_deg: f64,
    /// Per-axis sensor translation range, meters (uniform in +-range).
    pub trans_range_m: f64,
    /// Restrict motion to yaw + in-plane translation.
    pub planar_motion: bool,
    pub range_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            points_per_frame: 4096,
            ray_rows: 16,
            fov: (-24.8f64.to_radians(), 2.0f64.to_radians()),
            ground_plane: true,
            static_boxes: 6,
            dynamic_box: false,
            dynamic_motion_scale: 5.0,
            rot_range_deg: 3.0,
            trans_range_m: 1.5,
            planar_motion: false,
            range_max: 40.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.points_per_frame == 0 || self.ray_rows == 0 {
            return Err(HarnessError::BadConfig {
                reason: "ray grid must be non-empty".into(),
            });
        }
        if !(self.fov.1 > self.fov.0) {
            return Err(HarnessError::BadConfig {
                reason: "fov max must exceed min".into(),
            });
        }
        if self.rot_range_deg < 0.0 || self.trans_range_m < 0.0 || self.dynamic_motion_scale < 0.0 {
            return Err(HarnessError::BadConfig {
                reason: "motion ranges must be nonnegative".into(),
            });
        }
        if !self.ground_plane && self.static_boxes == 0 {
            return Err(HarnessError::BadConfig {
                reason: "scene needs at least one static structure".into(),
            });
        }
        Ok(())
    }
}

/// Which surface a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointLabel {
    Ground,
    StaticBox(u16),
    DynamicBox,
}

impl PointLabel {
    pub fn is_dynamic(&self) -> bool {
        matches!(self, PointLabel::DynamicBox)
    }
}

/// One synthetic frame pair with ground truth. `q_gt`/`t_gt` warp frame-1
/// points onto frame-2 coordinates (the direction the network's warp uses).
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub frame1: Vec<Vec3>,
    pub frame2: Vec<Vec3>,
    pub labels1: Vec<PointLabel>,
    pub labels2: Vec<PointLabel>,
    pub q_gt: Quaternion,
    pub t_gt: Translation,
}

#[derive(Debug, Clone, Copy)]
struct Box3 {
    min: Vec3,
    max: Vec3,
}

impl Box3 {
    /// Slab-method ray intersection; returns the entry distance.
    fn hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let mut t0 = 1e-6f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut near, mut far) = ((self.min[a] - origin[a]) * inv, (self.max[a] - origin[a]) * inv);
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }

    fn shifted(&self, d: &Vec3) -> Self {
        Self {
            min: [self.min[0] + d[0], self.min[1] + d[1], self.min[2] + d[2]],
            max: [self.max[0] + d[0], self.max[1] + d[1], self.max[2] + d[2]],
        }
    }
}

const SENSOR_HEIGHT: f64 = 1.7;

struct Scene {
    boxes: Vec<Box3>,
    dynamic: Option<Box3>,
    dynamic_shift: Vec3,
    ground: bool,
}

impl Scene {
    /// Casts one ray from `origin` along `dir` (world frame); returns the
    /// hit point and its label.
    fn cast(&self, origin: &Vec3, dir: &Vec3, range_max: f64, frame2: bool) -> Option<(Vec3, PointLabel)> {
        let mut best: Option<(f64, PointLabel)> = None;
        if self.ground && dir[2] < -1e-9 {
            let t = (-SENSOR_HEIGHT - origin[2]) / dir[2];
            if t > 1e-6 {
                best = Some((t, PointLabel::Ground));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if let Some(t) = b.hit(origin, dir) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, PointLabel::StaticBox(i as u16)));
                }
            }
        }
        if let Some(dynbox) = &self.dynamic {
            let placed = if frame2 {
                dynbox.shifted(&self.dynamic_shift)
            } else {
                *dynbox
            };
            if let Some(t) = placed.hit(origin, dir) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, PointLabel::DynamicBox));
                }
            }
        }
        let (t, label) = best?;
        if t > range_max {
            return None;
        }
        Some((
            [
                origin[0] + t * dir[0],
                origin[1] + t * dir[1],
                origin[2] + t * dir[2],
            ],
            label,
        ))
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.gen_range(-range..=range)
    }
}

/// Generates a frame pair by ray casting over the configured fan from two
/// sensor poses separated by a random rigid motion.
pub fn synth_scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SynthPair, HarnessError> {
    cfg.validate()?;

    // scene layout
    let mut boxes = Vec::new();
    for _ in 0..cfg.static_boxes {
        let cx = rng.gen_range(6.0..25.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let cy = rng.gen_range(6.0..25.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (wx, wy, wz) = (
            rng.gen_range(1.5..6.0),
            rng.gen_range(1.5..6.0),
            rng.gen_range(2.0..6.0),
        );
        boxes.push(Box3 {
            min: [cx - wx / 2.0, cy - wy / 2.0, -SENSOR_HEIGHT],
            max: [cx + wx / 2.0, cy + wy / 2.0, -SENSOR_HEIGHT + wz],
        });
    }

    // sensor motion: pose of sensor 2 in the frame of sensor 1
    let deg = std::f64::consts::PI / 180.0;
    let yaw = uniform(rng, cfg.rot_range_deg) * deg;
    let (pitch, roll) = if cfg.planar_motion {
        (0.0, 0.0)
    } else {
        (
            uniform(rng, cfg.rot_range_deg) * deg,
            uniform(rng, cfg.rot_range_deg) * deg,
        )
    };
    let tx = uniform(rng, cfg.trans_range_m);
    let ty = uniform(rng, cfg.trans_range_m);
    let tz = if cfg.planar_motion {
        0.0
    } else {
        uniform(rng, cfg.trans_range_m)
    };
    let r = euler_zyx_to_rotation(yaw, pitch, roll);
    let w2 = PoseMatrix::from_rows_unchecked([
        [r[0][0], r[0][1], r[0][2], tx],
        [r[1][0], r[1][1], r[1][2], ty],
        [r[2][0], r[2][1], r[2][2], tz],
    ]);

    // dynamic box in front of the sensor, moving by a multiple of the
    // sensor displacement in a random horizontal direction
    let sensor_motion = (tx * tx + ty * ty + tz * tz).sqrt().max(0.05);
    let dynamic = cfg.dynamic_box.then(|| {
        let cx = rng.gen_range(8.0..18.0);
        let cy = rng.gen_range(-6.0..6.0);
        let (wx, wy, wz) = (
            rng.gen_range(3.0..5.0),
            rng.gen_range(2.0..4.0),
            rng.gen_range(2.0..3.5),
        );
        Box3 {
            min: [cx - wx / 2.0, cy - wy / 2.0, -SENSOR_HEIGHT],
            max: [cx + wx / 2.0, cy + wy / 2.0, -SENSOR_HEIGHT + wz],
        }
    });
    let shift_dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let shift_mag = cfg.dynamic_motion_scale * sensor_motion;
    let scene = Scene {
        boxes,
        dynamic,
        dynamic_shift: [shift_mag * shift_dir.cos(), shift_mag * shift_dir.sin(), 0.0],
        ground: cfg.ground_plane,
    };

    // ray fan
    let ray_cols = (cfg.points_per_frame / cfg.ray_rows).max(1);
    let mut dirs = Vec::with_capacity(cfg.ray_rows * ray_cols);
    for i in 0..cfg.ray_rows {
        let el = cfg.fov.0
            + (i as f64 + 0.5) / cfg.ray_rows as f64 * (cfg.fov.1 - cfg.fov.0);
        for j in 0..ray_cols {
            let az = -std::f64::consts::PI
                + (j as f64 + 0.5) / ray_cols as f64 * std::f64::consts::TAU;
            dirs.push([el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]);
        }
    }

    // frame 1: sensor at the origin, axes aligned with the world
    let mut frame1 = Vec::new();
    let mut labels1 = Vec::new();
    for d in &dirs {
        if let Some((p, label)) = scene.cast(&[0.0; 3], d, cfg.range_max, false) {
            frame1.push(p);
            labels1.push(label);
        }
    }

    // frame 2: rays from the moved sensor, hits mapped into its own frame
    let w2_inv = w2.inverse();
    let origin2 = w2.translation();
    let mut frame2 = Vec::new();
    let mut labels2 = Vec::new();
    for d in &dirs {
        let dir_world = [
            r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2],
            r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2],
            r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2],
        ];
        if let Some((p, label)) = scene.cast(&origin2, &dir_world, cfg.range_max, true) {
            frame2.push(w2_inv.apply(&p));
            labels2.push(label);
        }
    }

    // warp-consistent ground truth: a frame-1 point p satisfies
    // w2_inv * p = its frame-2 coordinates
    let (q_gt, t_gt) = matrix_to_pose(&w2_inv);
    Ok(SynthPair {
        frame1,
        frame2,
        labels1,
        labels2,
        q_gt,
        t_gt,
    })
}
