//! Quaternion / SE(3) arithmetic, pose composition and training-set
//! augmentation.
//!
//! Conventions: Hamilton quaternions stored scalar-first `(w, x, y, z)`;
//! rigid transforms as row-major 3x4 matrices (rotation block plus
//! translation column); augmentation Euler angles compose intrinsically as
//! yaw(z) - pitch(y) - roll(x).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point or direction in 3D, meters.
pub type Vec3 = [f64; 3];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("quaternion norm {norm:e} is below 1e-12; cannot normalize")]
    ZeroQuaternion { norm: f64 },
    #[error("quaternion norm {norm} is not within 1e-6 of 1")]
    NonUnitQuaternion { norm: f64 },
    #[error("matrix is not a rigid transform: {reason}")]
    NonRigidMatrix { reason: String },
    #[error("invalid augmentation config: {reason}")]
    BadAugmentConfig { reason: String },
}

pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(a: &Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn sub3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn dist3(a: &Vec3, b: &Vec3) -> f64 {
    norm3(&sub3(a, b))
}

/// Hamilton quaternion, scalar first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn negated(&self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Hamilton product `self * rhs`.
    pub fn hamilton(&self, rhs: &Self) -> Self {
        Self::new(
            self.w * rhs.w - self.x * rhs.x - self.y * rhs.y - self.z * rhs.z,
            self.w * rhs.x + self.x * rhs.w + self.y * rhs.z - self.z * rhs.y,
            self.w * rhs.y - self.x * rhs.z + self.y * rhs.w + self.z * rhs.x,
            self.w * rhs.z + self.x * rhs.y - self.y * rhs.x + self.z * rhs.w,
        )
    }

    /// Rotation of `angle` radians about a unit `axis`.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let half = 0.5 * angle;
        let s = half.sin();
        Self::new(half.cos(), axis[0] * s, axis[1] * s, axis[2] * s)
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_rotation(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Angle in radians between two unit quaternions (double cover folded).
    pub fn angle_to(&self, other: &Self) -> f64 {
        2.0 * self.dot(other).abs().clamp(-1.0, 1.0).acos()
    }
}

/// Translation vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Translation {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl Translation {
    pub fn new(tx: f64, ty: f64, tz: f64) -> Self {
        Self { tx, ty, tz }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn as_vec3(&self) -> Vec3 {
        [self.tx, self.ty, self.tz]
    }

    pub fn from_vec3(v: Vec3) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// Row-major rigid 3x4 transform (rotation block + translation column).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMatrix {
    rows: [[f64; 4]; 3],
}

const ORTHO_TOL: f64 = 1e-6;

impl PoseMatrix {
    /// Validates orthonormality (within 1e-6) and det = +1 before accepting.
    pub fn new(rows: [[f64; 4]; 3]) -> Result<Self, GeometryError> {
        let m = Self { rows };
        let err = m.orthonormality_error();
        if err > ORTHO_TOL {
            return Err(GeometryError::NonRigidMatrix {
                reason: format!("rotation block deviates from orthonormal by {err:e}"),
            });
        }
        let det = m.det3();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::NonRigidMatrix {
                reason: format!("rotation determinant {det} != +1"),
            });
        }
        Ok(m)
    }

    pub(crate) fn from_rows_unchecked(rows: [[f64; 4]; 3]) -> Self {
        Self { rows }
    }

    pub fn identity() -> Self {
        Self {
            rows: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    pub fn rows(&self) -> &[[f64; 4]; 3] {
        &self.rows
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let r = &self.rows;
        [
            [r[0][0], r[0][1], r[0][2]],
            [r[1][0], r[1][1], r[1][2]],
            [r[2][0], r[2][1], r[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3 {
        [self.rows[0][3], self.rows[1][3], self.rows[2][3]]
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let r = &self.rows;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + r[0][3],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + r[1][3],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + r[2][3],
        ]
    }

    /// `self * rhs` as homogeneous transforms.
    pub fn compose(&self, rhs: &Self) -> Self {
        let a = &self.rows;
        let b = &rhs.rows;
        let mut out = [[0.0; 4]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
                if j == 3 {
                    *v += a[i][3];
                }
            }
        }
        Self { rows: out }
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation();
        let t = self.translation();
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let nt = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Self {
            rows: [
                [rt[0][0], rt[0][1], rt[0][2], nt[0]],
                [rt[1][0], rt[1][1], rt[1][2], nt[1]],
                [rt[2][0], rt[2][1], rt[2][2], nt[2]],
            ],
        }
    }

    pub(crate) fn orthonormality_error(&self) -> f64 {
        let r = self.rotation();
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut d = 0.0;
                for (row, _) in r.iter().enumerate() {
                    d += r[row][i] * r[row][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((d - expect).abs());
            }
        }
        worst
    }

    fn det3(&self) -> f64 {
        let r = self.rotation();
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    /// Nearest rotation via Newton polar iteration; used by pose-file loading
    /// after the 1e-4 sanity gate.
    pub fn reorthogonalized(&self) -> Self {
        let mut r = self.rotation();
        for _ in 0..8 {
            // R <- 1.5 R - 0.5 R R^T R, quadratic convergence near O(3)
            let mut rtr = [[0.0; 3]; 3];
            for (i, row) in rtr.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                }
            }
            let mut next = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    let rrtr: f64 = (0..3).map(|k| r[i][k] * rtr[k][j]).sum();
                    next[i][j] = 1.5 * r[i][j] - 0.5 * rrtr;
                }
            }
            r = next;
        }
        let t = self.translation();
        Self {
            rows: [
                [r[0][0], r[0][1], r[0][2], t[0]],
                [r[1][0], r[1][1], r[1][2], t[1]],
                [r[2][0], r[2][1], r[2][2], t[2]],
            ],
        }
    }
}

/// Normalizes `q` to unit length, preserving direction.
pub fn quat_normalize(q: &Quaternion) -> Result<Quaternion, GeometryError> {
    let n = q.norm();
    if n <= 1e-12 {
        return Err(GeometryError::ZeroQuaternion { norm: n });
    }
    Ok(Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n))
}

fn check_unit(q: &Quaternion) -> Result<(), GeometryError> {
    let n = q.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(GeometryError::NonUnitQuaternion { norm: n });
    }
    Ok(())
}

/// Rotates `p` by the unit quaternion `q`.
pub fn quat_rotate(q: &Quaternion, p: &Vec3) -> Result<Vec3, GeometryError> {
    check_unit(q)?;
    Ok(rotate_unchecked(q, p))
}

pub(crate) fn rotate_unchecked(q: &Quaternion, p: &Vec3) -> Vec3 {
    // p + 2w (v x p) + 2 v x (v x p), v = vector part
    let v = [q.x, q.y, q.z];
    let t = cross3(&v, p);
    let t2 = cross3(&v, &t);
    [
        p[0] + 2.0 * (q.w * t[0] + t2[0]),
        p[1] + 2.0 * (q.w * t[1] + t2[1]),
        p[2] + 2.0 * (q.w * t[2] + t2[2]),
    ]
}

/// Applies the rigid motion `(q, t)` to a point.
pub fn pose_warp_point(q: &Quaternion, t: &Translation, p: &Vec3) -> Result<Vec3, GeometryError> {
    let r = quat_rotate(q, p)?;
    Ok([r[0] + t.tx, r[1] + t.ty, r[2] + t.tz])
}

/// Composes a residual motion with a base motion: `q' = dq q` (renormalized),
/// `t' = dq t dq^-1 + dt`.
pub fn pose_compose(
    dq: &Quaternion,
    dt: &Translation,
    q: &Quaternion,
    t: &Translation,
) -> Result<(Quaternion, Translation), GeometryError> {
    check_unit(dq)?;
    check_unit(q)?;
    let qc = quat_normalize(&dq.hamilton(q))?;
    let rt = rotate_unchecked(dq, &t.as_vec3());
    Ok((
        qc,
        Translation::new(rt[0] + dt.tx, rt[1] + dt.ty, rt[2] + dt.tz),
    ))
}

/// Extracts `(q, t)` from a rigid matrix; quaternion canonicalized to w >= 0.
pub fn matrix_to_pose(m: &PoseMatrix) -> (Quaternion, Translation) {
    let r = m.rotation();
    let trace = r[0][0] + r[1][1] + r[2][2];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        Quaternion::new(
            0.25 * s,
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
        )
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        Quaternion::new(
            (r[2][1] - r[1][2]) / s,
            0.25 * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
        )
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        Quaternion::new(
            (r[0][2] - r[2][0]) / s,
            (r[0][1] + r[1][0]) / s,
            0.25 * s,
            (r[1][2] + r[2][1]) / s,
        )
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        Quaternion::new(
            (r[1][0] - r[0][1]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            0.25 * s,
        )
    };
    let q = quat_normalize(&q).expect("rotation matrix always yields a unit quaternion");
    let q = if q.w < 0.0 { q.negated() } else { q };
    (q, Translation::from_vec3(m.translation()))
}

/// Inverse of [`matrix_to_pose`].
pub fn pose_to_matrix(q: &Quaternion, t: &Translation) -> Result<PoseMatrix, GeometryError> {
    check_unit(q)?;
    let r = q.to_rotation();
    Ok(PoseMatrix::from_rows_unchecked([
        [r[0][0], r[0][1], r[0][2], t.tx],
        [r[1][0], r[1][1], r[1][2], t.ty],
        [r[2][0], r[2][1], r[2][2], t.tz],
    ]))
}

/// Truncated-Gaussian augmentation draw parameters. Std-devs in degrees for
/// the yaw/pitch/roll Euler angles and in meters for the translation axes;
/// draws are rejection-resampled until within `truncation` sigmas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub tx_m: f64,
    pub ty_m: f64,
    pub tz_m: f64,
    pub truncation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            yaw_deg: 0.05,
            pitch_deg: 0.01,
            roll_deg: 0.01,
            tx_m: 0.5,
            ty_m: 0.1,
            tz_m: 0.05,
            truncation: 2.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            yaw_deg: 0.0,
            pitch_deg: 0.0,
            roll_deg: 0.0,
            tx_m: 0.0,
            ty_m: 0.0,
            tz_m: 0.0,
            truncation: 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let stds = [
            self.yaw_deg,
            self.pitch_deg,
            self.roll_deg,
            self.tx_m,
            self.ty_m,
            self.tz_m,
        ];
        if stds.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(GeometryError::BadAugmentConfig {
                reason: "std-devs must be finite and >= 0".into(),
            });
        }
        if !(self.truncation > 0.0) {
            return Err(GeometryError::BadAugmentConfig {
                reason: "truncation must be > 0".into(),
            });
        }
        Ok(())
    }
}

fn truncated_gauss(rng: &mut impl Rng, sigma: f64, truncation: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let dist = Normal::new(0.0, sigma).expect("validated sigma");
    loop {
        let v = dist.sample(rng);
        if v.abs() <= truncation * sigma {
            return v;
        }
    }
}

/// Rotation matrix for intrinsic yaw(z) - pitch(y) - roll(x) Euler angles.
pub fn euler_zyx_to_rotation(yaw: f64, pitch: f64, roll: f64) -> [[f64; 3]; 3] {
    let (cy, sy) = (yaw.cos(), yaw.sin());
    let (cp, sp) = (pitch.cos(), pitch.sin());
    let (cr, sr) = (roll.cos(), roll.sin());
    // Rz(yaw) * Ry(pitch) * Rx(roll)
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
}

/// Draws a random rigid augmentation transform from truncated Gaussians.
pub fn make_augmentation(rng: &mut impl Rng, cfg: &AugmentConfig) -> PoseMatrix {
    let deg = std::f64::consts::PI / 180.0;
    let yaw = truncated_gauss(rng, cfg.yaw_deg, cfg.truncation) * deg;
    let pitch = truncated_gauss(rng, cfg.pitch_deg, cfg.truncation) * deg;
    let roll = truncated_gauss(rng, cfg.roll_deg, cfg.truncation) * deg;
    let tx = truncated_gauss(rng, cfg.tx_m, cfg.truncation);
    let ty = truncated_gauss(rng, cfg.ty_m, cfg.truncation);
    let tz = truncated_gauss(rng, cfg.tz_m, cfg.truncation);
    let r = euler_zyx_to_rotation(yaw, pitch, roll);
    PoseMatrix::from_rows_unchecked([
        [r[0][0], r[0][1], r[0][2], tx],
        [r[1][0], r[1][1], r[1][2], ty],
        [r[2][0], r[2][1], r[2][2], tz],
    ])
}

/// Applies `t_aug` to every point of the first frame and folds it into the
/// pair's ground-truth transform: returns `(t_aug * pc1, t_aug * t_p)`.
pub fn apply_augmentation(
    pc1: &[Vec3],
    t_p: &PoseMatrix,
    t_aug: &PoseMatrix,
) -> (Vec<Vec3>, PoseMatrix) {
    let warped = crate::exec::map(pc1.len(), |i| t_aug.apply(&pc1[i]));
    (warped, t_aug.compose(t_p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EPS: f64 = 1e-9;

    fn assert_vec3_eq(a: &Vec3, b: &Vec3, tol: f64) {
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() <= tol, "{a:?} vs {b:?} at {i}");
        }
    }

    /// Independent oracle: rotate through the explicit rotation matrix.
    fn rotation_matrix_oracle(q: &Quaternion, p: &Vec3) -> Vec3 {
        let r = q.to_rotation();
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    #[test]
    fn normalize_examples() {
        let q = quat_normalize(&Quaternion::new(2.0, 0.0, 0.0, 0.0)).unwrap();
        assert_eq!(q, Quaternion::new(1.0, 0.0, 0.0, 0.0));
        let q = quat_normalize(&Quaternion::new(0.0, 3.0, 4.0, 0.0)).unwrap();
        assert_vec3_eq(&[q.x, q.y, q.z], &[0.6, 0.8, 0.0], EPS);
        assert!(q.w.abs() < EPS);
        let q = quat_normalize(&Quaternion::new(1.0, 1.0, 1.0, 1.0)).unwrap();
        assert_eq!(q, Quaternion::new(0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn normalize_rejects_zero() {
        let err = quat_normalize(&Quaternion::new(0.0, 0.0, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, GeometryError::ZeroQuaternion { .. }));
    }

    #[test]
    fn rotate_examples() {
        let id = Quaternion::identity();
        assert_vec3_eq(&quat_rotate(&id, &[5.0, -2.0, 3.0]).unwrap(), &[5.0, -2.0, 3.0], EPS);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let qz = Quaternion::new(h, 0.0, 0.0, h); // 90 deg about z
        let got = quat_rotate(&qz, &[1.0, 0.0, 0.0]).unwrap();
        assert_vec3_eq(&got, &rotation_matrix_oracle(&qz, &[1.0, 0.0, 0.0]), EPS);
        assert_vec3_eq(&got, &[0.0, 1.0, 0.0], EPS);

        let qx = Quaternion::new(0.0, 1.0, 0.0, 0.0); // 180 deg about x
        let got = quat_rotate(&qx, &[1.0, 2.0, 3.0]).unwrap();
        assert_vec3_eq(&got, &rotation_matrix_oracle(&qx, &[1.0, 2.0, 3.0]), EPS);
        assert_vec3_eq(&got, &[1.0, -2.0, -3.0], EPS);
    }

    #[test]
    fn rotate_rejects_non_unit() {
        let q = Quaternion::new(2.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            quat_rotate(&q, &[1.0, 0.0, 0.0]),
            Err(GeometryError::NonUnitQuaternion { .. })
        ));
    }

    #[test]
    fn warp_point_examples() {
        let id = Quaternion::identity();
        let t = Translation::new(1.0, 0.0, 0.0);
        assert_vec3_eq(&pose_warp_point(&id, &t, &[0.0; 3]).unwrap(), &[1.0, 0.0, 0.0], EPS);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let qz = Quaternion::new(h, 0.0, 0.0, h);
        let t = Translation::new(0.0, 0.0, 1.0);
        let got = pose_warp_point(&qz, &t, &[1.0, 0.0, 0.0]).unwrap();
        assert_vec3_eq(&got, &[0.0, 1.0, 1.0], EPS);

        let got = pose_warp_point(&id, &Translation::zero(), &[7.0, 8.0, 9.0]).unwrap();
        assert_vec3_eq(&got, &[7.0, 8.0, 9.0], EPS);
    }

    #[test]
    fn compose_examples() {
        let q = quat_normalize(&Quaternion::new(0.9, 0.1, -0.2, 0.3)).unwrap();
        let t = Translation::new(0.4, -1.0, 2.0);
        let (qc, tc) = pose_compose(&Quaternion::identity(), &Translation::zero(), &q, &t).unwrap();
        assert!(q.angle_to(&qc) < EPS);
        assert_vec3_eq(&tc.as_vec3(), &t.as_vec3(), EPS);

        let (_, tc) = pose_compose(
            &Quaternion::identity(),
            &Translation::new(1.0, 0.0, 0.0),
            &Quaternion::identity(),
            &Translation::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        assert_vec3_eq(&tc.as_vec3(), &[1.0, 1.0, 0.0], EPS);

        // 4x4 matrix-composition oracle
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let dq = Quaternion::new(h, 0.0, 0.0, h);
        let (qc, tc) = pose_compose(
            &dq,
            &Translation::zero(),
            &Quaternion::identity(),
            &Translation::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        let expect = pose_to_matrix(&dq, &Translation::zero())
            .unwrap()
            .compose(&pose_to_matrix(&Quaternion::identity(), &Translation::new(1.0, 0.0, 0.0)).unwrap());
        let got = pose_to_matrix(&qc, &tc).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((got.rows()[i][j] - expect.rows()[i][j]).abs() < EPS);
            }
        }
        assert_vec3_eq(&tc.as_vec3(), &[0.0, 1.0, 0.0], EPS);
    }

    #[test]
    fn matrix_pose_roundtrip_examples() {
        let (q, t) = matrix_to_pose(&PoseMatrix::identity());
        assert!(q.angle_to(&Quaternion::identity()) < EPS);
        assert_vec3_eq(&t.as_vec3(), &[0.0; 3], EPS);

        let m = PoseMatrix::new([
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 5.0],
        ])
        .unwrap();
        let (q, t) = matrix_to_pose(&m);
        assert!(q.angle_to(&Quaternion::identity()) < EPS);
        assert_vec3_eq(&t.as_vec3(), &[0.0, 0.0, 5.0], EPS);

        let m = PoseMatrix::new([
            [0.0, -1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ])
        .unwrap();
        let (q, _) = matrix_to_pose(&m);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((q.w - h).abs() < EPS && (q.z - h).abs() < EPS);
    }

    #[test]
    fn non_rigid_matrix_rejected() {
        let err = PoseMatrix::new([
            [2.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ])
        .unwrap_err();
        assert!(matches!(err, GeometryError::NonRigidMatrix { .. }));

        // reflection: orthonormal but det = -1
        let err = PoseMatrix::new([
            [-1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ])
        .unwrap_err();
        assert!(matches!(err, GeometryError::NonRigidMatrix { .. }));
    }

    #[test]
    fn augmentation_zero_sigma_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = AugmentConfig::disabled();
        let m = make_augmentation(&mut rng, &cfg);
        assert_eq!(m, PoseMatrix::identity());
    }

    #[test]
    fn augmentation_outputs_are_rigid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = AugmentConfig::default();
        for _ in 0..100 {
            let m = make_augmentation(&mut rng, &cfg);
            assert!(m.orthonormality_error() < 1e-9);
            assert!((m.det3() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn augmentation_truncated_gaussian_statistics() {
        // yaw only, sigma = 0.05 deg, truncation 2: every |yaw| <= 0.1 deg and
        // the empirical sigma matches the +-2-sigma truncated normal,
        // sigma_trunc = sigma * sqrt(1 - 4 phi(2) / (2 Phi(2) - 1)) = 0.8796 sigma.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = AugmentConfig {
            yaw_deg: 0.05,
            pitch_deg: 0.0,
            roll_deg: 0.0,
            tx_m: 0.0,
            ty_m: 0.0,
            tz_m: 0.0,
            truncation: 2.0,
        };
        let mut sum_sq = 0.0;
        for _ in 0..10_000 {
            let m = make_augmentation(&mut rng, &cfg);
            let r = m.rotation();
            let yaw_deg = r[1][0].atan2(r[0][0]).to_degrees();
            assert!(yaw_deg.abs() <= 0.1 + 1e-12, "yaw {yaw_deg} outside window");
            sum_sq += yaw_deg * yaw_deg;
        }
        let empirical = (sum_sq / 10_000.0).sqrt();
        let expected = 0.879_625_6 * 0.05;
        assert!(
            (empirical - expected).abs() / expected < 0.2,
            "empirical sigma {empirical} vs truncated-normal {expected}"
        );
    }

    #[test]
    fn apply_augmentation_examples() {
        let pc: Vec<Vec3> = vec![[1.0, 2.0, 3.0], [-4.0, 0.5, 0.0]];
        let t_p = pose_to_matrix(
            &quat_normalize(&Quaternion::new(0.8, 0.1, 0.2, -0.1)).unwrap(),
            &Translation::new(0.5, -0.25, 1.0),
        )
        .unwrap();

        let (out, t_trans) = apply_augmentation(&pc, &t_p, &PoseMatrix::identity());
        assert_eq!(out, pc);
        assert_eq!(t_trans, t_p);

        let shift = PoseMatrix::new([
            [1.0, 0.0, 0.0, 2.0],
            [0.0, 1.0, 0.0, -1.0],
            [0.0, 0.0, 1.0, 0.5],
        ])
        .unwrap();
        let (out, t_trans) = apply_augmentation(&pc, &t_p, &shift);
        assert_vec3_eq(&out[0], &[3.0, 1.0, 3.5], EPS);
        let tp_t = t_p.translation();
        assert_vec3_eq(
            &t_trans.translation(),
            &[tp_t[0] + 2.0, tp_t[1] - 1.0, tp_t[2] + 0.5],
            EPS,
        );
    }

    fn arb_unit_quat() -> impl Strategy<Value = Quaternion> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-degenerate", |(w, x, y, z)| {
                (w * w + x * x + y * y + z * z).sqrt() > 1e-3
            })
            .prop_map(|(w, x, y, z)| quat_normalize(&Quaternion::new(w, x, y, z)).unwrap())
    }

    fn arb_translation() -> impl Strategy<Value = Translation> {
        (-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0)
            .prop_map(|(a, b, c)| Translation::new(a, b, c))
    }

    proptest! {
        #[test]
        fn rotation_is_isometric(q in arb_unit_quat(), p in prop::array::uniform3(-100.0f64..100.0)) {
            let r = quat_rotate(&q, &p).unwrap();
            prop_assert!((norm3(&r) - norm3(&p)).abs() < 1e-9);
        }

        #[test]
        fn warp_preserves_pairwise_distances(
            q in arb_unit_quat(),
            t in arb_translation(),
            a in prop::array::uniform3(-100.0f64..100.0),
            b in prop::array::uniform3(-100.0f64..100.0),
        ) {
            let wa = pose_warp_point(&q, &t, &a).unwrap();
            let wb = pose_warp_point(&q, &t, &b).unwrap();
            prop_assert!((dist3(&wa, &wb) - dist3(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn compose_matches_matrix_composition(
            dq in arb_unit_quat(), dt in arb_translation(),
            q in arb_unit_quat(), t in arb_translation(),
        ) {
            let (qc, tc) = pose_compose(&dq, &dt, &q, &t).unwrap();
            let got = pose_to_matrix(&qc, &tc).unwrap();
            let expect = pose_to_matrix(&dq, &dt).unwrap().compose(&pose_to_matrix(&q, &t).unwrap());
            for i in 0..3 {
                for j in 0..4 {
                    prop_assert!((got.rows()[i][j] - expect.rows()[i][j]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn matrix_pose_roundtrip(q in arb_unit_quat(), t in arb_translation()) {
            let q = if q.w < 0.0 { q.negated() } else { q };
            let m = pose_to_matrix(&q, &t).unwrap();
            let (q2, t2) = matrix_to_pose(&m);
            prop_assert!((q.w - q2.w).abs() < 1e-9);
            prop_assert!((q.x - q2.x).abs() < 1e-9);
            prop_assert!((q.y - q2.y).abs() < 1e-9);
            prop_assert!((q.z - q2.z).abs() < 1e-9);
            for i in 0..3 {
                prop_assert!((t.as_vec3()[i] - t2.as_vec3()[i]).abs() < 1e-9);
            }
            let m2 = pose_to_matrix(&q2, &t2).unwrap();
            for i in 0..3 {
                for j in 0..4 {
                    prop_assert!((m.rows()[i][j] - m2.rows()[i][j]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn augmentation_composition_consistency(
            q in arb_unit_quat(), t in arb_translation(),
            aq in arb_unit_quat(), at in arb_translation(),
            x in prop::array::uniform3(-30.0f64..30.0),
        ) {
            let t_p = pose_to_matrix(&q, &t).unwrap();
            let t_aug = pose_to_matrix(&aq, &at).unwrap();
            let (_, t_trans) = apply_augmentation(&[x], &t_p, &t_aug);
            let direct = t_trans.apply(&x);
            let chained = t_aug.apply(&t_p.apply(&x));
            for i in 0..3 {
                prop_assert!((direct[i] - chained[i]).abs() < 1e-9);
            }
        }
    }
}
