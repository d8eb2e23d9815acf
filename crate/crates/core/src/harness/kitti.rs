//! KITTI-format scan and pose-file IO plus trajectory algebra.

use std::io::Write;
use std::path::Path;

use super::HarnessError;
use crate::geometry::{PoseMatrix, Vec3};
use crate::projection::crop_square;

/// Ordered absolute poses, frame-indexed, in the KITTI ground-truth
/// convention (each matrix maps frame coordinates into the world frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory(pub Vec<PoseMatrix>);

impl Trajectory {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.0.iter().map(|m| m.translation()).collect()
    }
}

/// Reads a Velodyne binary scan: little-endian f32 quadruples
/// `(x, y, z, reflectance)`; only the coordinates are used. Points outside
/// the `half_side` square around the sensor are cropped.
pub fn load_scan(path: &Path, half_side: f64) -> Result<Vec<Vec3>, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(HarnessError::MalformedScan {
            path: path.display().to_string(),
            len: bytes.len(),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (i, quad) in bytes.chunks_exact(16).enumerate() {
        let x = f32::from_le_bytes(quad[0..4].try_into().unwrap()) as f64;
        let y = f32::from_le_bytes(quad[4..8].try_into().unwrap()) as f64;
        let z = f32::from_le_bytes(quad[8..12].try_into().unwrap()) as f64;
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(HarnessError::NonFinitePoint {
                path: path.display().to_string(),
                index: i,
            });
        }
        points.push([x, y, z]);
    }
    Ok(crop_square(&points, half_side))
}

/// Parses a KITTI pose file: one row-major 3x4 matrix (12 numbers) per line.
/// Rotations off orthonormal by more than 1e-4 are rejected; smaller drift
/// is re-orthogonalized.
pub fn load_poses(path: &Path) -> Result<Trajectory, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_poses(&text, &path.display().to_string())
}

pub(crate) fn parse_poses(text: &str, origin: &str) -> Result<Trajectory, HarnessError> {
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let nums: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let nums = nums.map_err(|e| HarnessError::ParseError {
            path: origin.to_string(),
            line: lineno + 1,
            reason: format!("{e}"),
        })?;
        if nums.len() != 12 {
            return Err(HarnessError::ParseError {
                path: origin.to_string(),
                line: lineno + 1,
                reason: format!("expected 12 numbers, got {}", nums.len()),
            });
        }
        let rows = [
            [nums[0], nums[1], nums[2], nums[3]],
            [nums[4], nums[5], nums[6], nums[7]],
            [nums[8], nums[9], nums[10], nums[11]],
        ];
        let raw = PoseMatrix::from_rows_unchecked(rows);
        let ortho_err = raw.orthonormality_error();
        if ortho_err > 1e-4 {
            return Err(HarnessError::ParseError {
                path: origin.to_string(),
                line: lineno + 1,
                reason: format!("rotation deviates from orthonormal by {ortho_err:e}"),
            });
        }
        let fixed = raw.reorthogonalized();
        let pose = PoseMatrix::new(*fixed.rows()).map_err(|e| HarnessError::ParseError {
            path: origin.to_string(),
            line: lineno + 1,
            reason: format!("{e}"),
        })?;
        poses.push(pose);
    }
    Ok(Trajectory(poses))
}

/// Writes poses in the KITTI format (12 numbers per line, shortest exact
/// decimal representation, so reload is bit-faithful).
pub fn write_poses(traj: &Trajectory, path: &Path) -> Result<(), HarnessError> {
    let mut out = String::new();
    for pose in &traj.0 {
        let r = pose.rows();
        let mut first = true;
        for row in r {
            for v in row {
                if !first {
                    out.push(' ');
                }
                out.push_str(&format!("{v}"));
                first = false;
            }
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| HarnessError::io(path, e))?;
    Ok(())
}

/// Relative motion between two absolute poses: `T_i^-1 T_j`.
pub fn relative_pose(t_i: &PoseMatrix, t_j: &PoseMatrix) -> PoseMatrix {
    t_i.inverse().compose(t_j)
}

/// Rebuilds an absolute trajectory from per-step relative motions, starting
/// at the identity: `T_k = T_{k-1} rel_k`.
pub fn accumulate(relatives: &[PoseMatrix]) -> Trajectory {
    let mut poses = Vec::with_capacity(relatives.len() + 1);
    poses.push(PoseMatrix::identity());
    for rel in relatives {
        let prev = *poses.last().unwrap();
        poses.push(prev.compose(rel));
    }
    Trajectory(poses)
}

/// Conjugates every pose by a sensor extrinsic: `E^-1 T E`, converting e.g.
/// camera-frame ground truth into the LiDAR frame.
pub fn apply_extrinsic(traj: &Trajectory, extrinsic: &PoseMatrix) -> Trajectory {
    let inv = extrinsic.inverse();
    Trajectory(
        traj.0
            .iter()
            .map(|t| inv.compose(t).compose(extrinsic))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{matrix_to_pose, pose_to_matrix, quat_normalize, Quaternion, Translation};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("plo-kitti-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn scan_reads_quadruples_and_drops_reflectance() {
        let path = tmp("two_points.bin");
        let mut bytes = Vec::new();
        for v in [1.5f32, -2.0, 0.25, 0.9, 3.0, 4.0, -1.0, 0.1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        let pts = load_scan(&path, f64::INFINITY).unwrap();
        assert_eq!(pts, vec![[1.5, -2.0, 0.25], [3.0, 4.0, -1.0]]);
    }

    #[test]
    fn empty_scan_gives_no_points() {
        let path = tmp("empty.bin");
        std::fs::write(&path, b"").unwrap();
        assert_eq!(load_scan(&path, 15.0).unwrap().len(), 0);
    }

    #[test]
    fn scan_roundtrip_is_bit_exact() {
        let path = tmp("roundtrip.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bytes = Vec::new();
        let mut want = Vec::new();
        for _ in 0..100 {
            let p: [f32; 3] = [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen()];
            for v in p {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.extend_from_slice(&0.5f32.to_le_bytes());
            want.push([p[0] as f64, p[1] as f64, p[2] as f64]);
        }
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(load_scan(&path, f64::INFINITY).unwrap(), want);
    }

    #[test]
    fn misaligned_scan_is_rejected() {
        let path = tmp("bad.bin");
        std::fs::write(&path, [0u8; 17]).unwrap();
        assert!(matches!(
            load_scan(&path, 15.0),
            Err(HarnessError::MalformedScan { len: 17, .. })
        ));
    }

    #[test]
    fn crop_is_applied_on_load() {
        let path = tmp("crop.bin");
        let mut bytes = Vec::new();
        for v in [20.0f32, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        assert_eq!(load_scan(&path, 15.0).unwrap().len(), 1);
    }

    #[test]
    fn pose_line_parses_identity() {
        let traj = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n", "test").unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.0[0], PoseMatrix::identity());
    }

    #[test]
    fn two_lines_two_poses() {
        let text = "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 5 0 1 0 0 0 0 1 0\n";
        assert_eq!(parse_poses(text, "test").unwrap().len(), 2);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 oops 0 1 0 0 0 0 1 0\n";
        match parse_poses(text, "test") {
            Err(HarnessError::ParseError { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        let text = "1 0 0 0 0 1 0 0 0 0 1\n";
        match parse_poses(text, "test") {
            Err(HarnessError::ParseError { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        // a left-handed "rotation"
        let text = "-1 0 0 0 0 1 0 0 0 0 1 0\n";
        assert!(parse_poses(text, "test").is_err());
    }

    fn random_trajectory(rng: &mut ChaCha8Rng, n: usize) -> Trajectory {
        let mut poses = vec![PoseMatrix::identity()];
        for _ in 1..n {
            let q = quat_normalize(&Quaternion::new(
                1.0,
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.05..0.05),
                rng.gen_range(-0.2..0.2),
            ))
            .unwrap();
            let t = Translation::new(rng.gen_range(0.5..1.5), rng.gen_range(-0.2..0.2), 0.0);
            let step = pose_to_matrix(&q, &t).unwrap();
            let prev = *poses.last().unwrap();
            poses.push(prev.compose(&step));
        }
        Trajectory(poses)
    }

    #[test]
    fn write_then_load_reproduces_poses() {
        let path = tmp("traj.txt");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let traj = random_trajectory(&mut rng, 40);
        write_poses(&traj, &path).unwrap();
        let back = load_poses(&path).unwrap();
        assert_eq!(back.len(), traj.len());
        for (a, b) in traj.0.iter().zip(&back.0) {
            for i in 0..3 {
                for j in 0..4 {
                    assert!((a.rows()[i][j] - b.rows()[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn relative_pose_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let traj = random_trajectory(&mut rng, 10);
        let a = traj.0[3];
        let self_rel = relative_pose(&a, &a);
        let rel_from_identity = relative_pose(&PoseMatrix::identity(), &a);
        for i in 0..3 {
            for j in 0..4 {
                let id = PoseMatrix::identity();
                assert!((self_rel.rows()[i][j] - id.rows()[i][j]).abs() < 1e-12);
                assert!((rel_from_identity.rows()[i][j] - a.rows()[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn accumulate_inverts_relative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let traj = random_trajectory(&mut rng, 30);
        let rels: Vec<PoseMatrix> = traj
            .0
            .windows(2)
            .map(|w| relative_pose(&w[0], &w[1]))
            .collect();
        let rebuilt = accumulate(&rels);
        assert_eq!(rebuilt.len(), traj.len());
        for (a, b) in traj.0.iter().zip(&rebuilt.0) {
            for i in 0..3 {
                for j in 0..4 {
                    assert!((a.rows()[i][j] - b.rows()[i][j]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn extrinsic_conjugation_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let traj = random_trajectory(&mut rng, 8);
        let (q, t) = matrix_to_pose(&random_trajectory(&mut rng, 2).0[1]);
        let e = pose_to_matrix(&q, &t).unwrap();
        let converted = apply_extrinsic(&traj, &e);
        let back = apply_extrinsic(&converted, &e.inverse());
        for (a, b) in traj.0.iter().zip(&back.0) {
            for i in 0..3 {
                for j in 0..4 {
                    assert!((a.rows()[i][j] - b.rows()[i][j]).abs() < 1e-9);
                }
            }
        }
    }
}
