//! Trajectory metrics: the KITTI subsequence protocol (t_rel, r_rel) and the
//! TUM-style absolute/relative errors (ATE after closed-form alignment, RPE
//! per frame step).

use serde::{Deserialize, Serialize};

use super::{HarnessError, Trajectory};
use crate::exec;
use crate::geometry::{PoseMatrix, Vec3};

/// Subsequence lengths of the KITTI protocol, meters.
pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KittiMetrics {
    /// Average translational RMSE, percent.
    pub t_rel: f64,
    /// Average rotational RMSE, degrees per 100 m.
    pub r_rel: f64,
    /// Per-length breakdown `(length_m, t_rel_pct, r_rel_deg_per_100m, count)`.
    pub per_length: Vec<(f64, f64, f64, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub t_rel: f64,
    pub r_rel: f64,
    pub ate: f64,
    pub rpe: f64,
    pub per_length: Vec<(f64, f64, f64, usize)>,
}

/// Cumulative arc length along a trajectory's translations.
pub fn trajectory_distances(traj: &Trajectory) -> Vec<f64> {
    let mut dist = Vec::with_capacity(traj.len());
    dist.push(0.0);
    for w in traj.0.windows(2) {
        let d = crate::geometry::dist3(&w[0].translation(), &w[1].translation());
        dist.push(dist.last().unwrap() + d);
    }
    dist
}

fn rotation_error_rad(e: &PoseMatrix) -> f64 {
    let r = e.rotation();
    let trace = r[0][0] + r[1][1] + r[2][2];
    (0.5 * (trace - 1.0)).clamp(-1.0, 1.0).acos()
}

fn translation_error(e: &PoseMatrix) -> f64 {
    crate::geometry::norm3(&e.translation())
}

/// KITTI odometry protocol: for every start frame and every length in
/// 100..800 m reachable along the ground-truth arc, compare the relative
/// motions and normalize by the nominal subsequence length. Errors if no
/// 100 m subsequence exists.
pub fn kitti_metrics(pred: &Trajectory, gt: &Trajectory) -> Result<KittiMetrics, HarnessError> {
    if pred.len() != gt.len() {
        return Err(HarnessError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if gt.len() < 2 {
        return Err(HarnessError::TrajectoryTooShort {
            reason: "need at least two poses".into(),
        });
    }
    let dist = trajectory_distances(gt);

    // one row of (t_err_pct, r_err_deg_per_100m) per (start, length) pair
    let per_start: Vec<Vec<(usize, f64, f64)>> = exec::map(gt.len(), |first| {
        let mut rows = Vec::new();
        for (li, &len) in KITTI_LENGTHS.iter().enumerate() {
            let target = dist[first] + len;
            let Some(last) = (first..gt.len()).find(|&i| dist[i] >= target) else {
                break;
            };
            let delta_gt = gt.0[first].inverse().compose(&gt.0[last]);
            let delta_pred = pred.0[first].inverse().compose(&pred.0[last]);
            let error = delta_pred.inverse().compose(&delta_gt);
            let t_err = translation_error(&error) / len * 100.0;
            let r_err = rotation_error_rad(&error).to_degrees() / len * 100.0;
            rows.push((li, t_err, r_err));
        }
        rows
    });

    let mut sums = vec![(0.0f64, 0.0f64, 0usize); KITTI_LENGTHS.len()];
    for rows in &per_start {
        for &(li, t, r) in rows {
            sums[li].0 += t;
            sums[li].1 += r;
            sums[li].2 += 1;
        }
    }
    if sums[0].2 == 0 {
        return Err(HarnessError::TrajectoryTooShort {
            reason: format!(
                "no 100 m subsequence in a {:.1} m trajectory",
                dist.last().unwrap()
            ),
        });
    }
    let per_length: Vec<(f64, f64, f64, usize)> = KITTI_LENGTHS
        .iter()
        .zip(&sums)
        .filter(|(_, s)| s.2 > 0)
        .map(|(&len, &(t, r, n))| (len, t / n as f64, r / n as f64, n))
        .collect();
    let total: usize = sums.iter().map(|s| s.2).sum();
    let t_rel = sums.iter().map(|s| s.0).sum::<f64>() / total as f64;
    let r_rel = sums.iter().map(|s| s.1).sum::<f64>() / total as f64;
    Ok(KittiMetrics {
        t_rel,
        r_rel,
        per_length,
    })
}

/// ATE (RMSE of positions after closed-form rigid alignment) and RPE (RMSE
/// of per-frame-step relative translation residuals).
pub fn ate_rpe(pred: &Trajectory, gt: &Trajectory) -> Result<(f64, f64), HarnessError> {
    if pred.len() != gt.len() {
        return Err(HarnessError::LengthMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    if pred.len() < 2 {
        return Err(HarnessError::TrajectoryTooShort {
            reason: "need at least two poses".into(),
        });
    }
    let p = pred.positions();
    let g = gt.positions();
    let (r, t) = procrustes_align(&p, &g);

    let mut sq = 0.0;
    for (pi, gi) in p.iter().zip(&g) {
        let aligned = [
            r[0][0] * pi[0] + r[0][1] * pi[1] + r[0][2] * pi[2] + t[0],
            r[1][0] * pi[0] + r[1][1] * pi[1] + r[1][2] * pi[2] + t[1],
            r[2][0] * pi[0] + r[2][1] * pi[1] + r[2][2] * pi[2] + t[2],
        ];
        sq += crate::geometry::dist3(&aligned, gi).powi(2);
    }
    let ate = (sq / p.len() as f64).sqrt();

    let mut sq = 0.0;
    for i in 0..pred.len() - 1 {
        let rel_gt = gt.0[i].inverse().compose(&gt.0[i + 1]);
        let rel_pred = pred.0[i].inverse().compose(&pred.0[i + 1]);
        let err = rel_gt.inverse().compose(&rel_pred);
        sq += translation_error(&err).powi(2);
    }
    let rpe = (sq / (pred.len() - 1) as f64).sqrt();
    Ok((ate, rpe))
}

/// Closed-form rigid alignment `(R, t)` minimizing `sum |R p_i + t - g_i|^2`
/// (orthogonal Procrustes on positions, quaternion form: the optimal
/// rotation is the top eigenvector of the 4x4 correlation matrix).
fn procrustes_align(p: &[Vec3], g: &[Vec3]) -> ([[f64; 3]; 3], Vec3) {
    let n = p.len() as f64;
    let mut cp = [0.0; 3];
    let mut cg = [0.0; 3];
    for (pi, gi) in p.iter().zip(g) {
        for a in 0..3 {
            cp[a] += pi[a] / n;
            cg[a] += gi[a] / n;
        }
    }
    // cross-covariance of centered clouds
    let mut m = [[0.0; 3]; 3];
    for (pi, gi) in p.iter().zip(g) {
        let dp = [pi[0] - cp[0], pi[1] - cp[1], pi[2] - cp[2]];
        let dg = [gi[0] - cg[0], gi[1] - cg[1], gi[2] - cg[2]];
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] += dp[a] * dg[b];
            }
        }
    }
    // 4x4 symmetric matrix whose top eigenvector is the optimal quaternion
    let (sxx, sxy, sxz) = (m[0][0], m[0][1], m[0][2]);
    let (syx, syy, syz) = (m[1][0], m[1][1], m[1][2]);
    let (szx, szy, szz) = (m[2][0], m[2][1], m[2][2]);
    let nmat = [
        [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
        [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
        [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
        [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
    ];
    let q = top_eigenvector_4x4(&nmat);
    let quat = crate::geometry::Quaternion::new(q[0], q[1], q[2], q[3]);
    let quat = crate::geometry::quat_normalize(&quat)
        .unwrap_or(crate::geometry::Quaternion::identity());
    let r = quat.to_rotation();
    let t = [
        cg[0] - (r[0][0] * cp[0] + r[0][1] * cp[1] + r[0][2] * cp[2]),
        cg[1] - (r[1][0] * cp[0] + r[1][1] * cp[1] + r[1][2] * cp[2]),
        cg[2] - (r[2][0] * cp[0] + r[2][1] * cp[1] + r[2][2] * cp[2]),
    ];
    (r, t)
}

/// Eigenvector of the largest eigenvalue of a symmetric 4x4 matrix, by
/// cyclic Jacobi rotations (deterministic, plenty for this size).
fn top_eigenvector_4x4(a: &[[f64; 4]; 4]) -> [f64; 4] {
    let mut m = *a;
    let mut v = [[0.0; 4]; 4];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _ in 0..64 {
        // largest off-diagonal element
        let (mut p, mut q, mut biggest) = (0, 1, 0.0f64);
        for i in 0..4 {
            for j in i + 1..4 {
                if m[i][j].abs() > biggest {
                    biggest = m[i][j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if biggest < 1e-15 {
            break;
        }
        let theta = 0.5 * (m[q][q] - m[p][p]) / m[p][q];
        let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
        let c = 1.0 / (t * t + 1.0).sqrt();
        let s = t * c;
        for k in 0..4 {
            let (mkp, mkq) = (m[k][p], m[k][q]);
            m[k][p] = c * mkp - s * mkq;
            m[k][q] = s * mkp + c * mkq;
        }
        for k in 0..4 {
            let (mpk, mqk) = (m[p][k], m[q][k]);
            m[p][k] = c * mpk - s * mqk;
            m[q][k] = s * mpk + c * mqk;
        }
        for row in v.iter_mut() {
            let (vp, vq) = (row[p], row[q]);
            row[p] = c * vp - s * vq;
            row[q] = s * vp + c * vq;
        }
    }
    let mut best = 0;
    for i in 1..4 {
        if m[i][i] > m[best][best] {
            best = i;
        }
    }
    [v[0][best], v[1][best], v[2][best], v[3][best]]
}
