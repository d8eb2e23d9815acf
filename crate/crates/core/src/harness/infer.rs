//! Sequence inference: run the network over consecutive scan pairs and
//! accumulate the finest-level poses into a trajectory.

use std::path::PathBuf;
use std::time::Instant;

use super::{HarnessError, Trajectory};
use crate::geometry::{pose_to_matrix, PoseMatrix, Quaternion, Translation};
use crate::numeric::{BoundParams, ParamStore, Tape};
use crate::odometry::{forward, Model};
use crate::projection::{project, ProjectedCloud};

/// Wall-clock split for one frame pair, seconds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PairTiming {
    pub data_prep_s: f64,
    pub inference_s: f64,
}

use serde::Serialize;

/// Runs the network over consecutive scans; `T_k = T_{k-1} M_k` with the
/// first pose the identity, so `N` scans produce `N` poses.
pub fn infer_sequence(
    model: &Model,
    params: &ParamStore,
    scan_paths: &[PathBuf],
    half_side: f64,
    seed: u64,
) -> Result<(Trajectory, Vec<PairTiming>), HarnessError> {
    if scan_paths.len() < 2 {
        return Err(HarnessError::TrajectoryTooShort {
            reason: format!("need at least two scans, got {}", scan_paths.len()),
        });
    }
    let mut poses = vec![PoseMatrix::identity()];
    let mut timings = Vec::with_capacity(scan_paths.len() - 1);

    let load = |path: &PathBuf| -> Result<ProjectedCloud, HarnessError> {
        let points = super::load_scan(path, half_side)?;
        Ok(project(&points, &model.cfg.projection).0)
    };

    let t0 = Instant::now();
    let mut prev = load(&scan_paths[0])?;
    let mut carry_prep = t0.elapsed().as_secs_f64();

    for (k, path) in scan_paths.iter().enumerate().skip(1) {
        let t0 = Instant::now();
        let next = load(path)?;
        let data_prep_s = carry_prep + t0.elapsed().as_secs_f64();
        carry_prep = 0.0;

        let t0 = Instant::now();
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params)?;
        let out = forward(&mut tape, &bound, model, &prev, &next, seed ^ k as u64)?;
        let fine = &out.levels[0];
        let qd = tape.value(fine.q).data();
        let td = tape.value(fine.t).data();
        let q = Quaternion::new(qd[0], qd[1], qd[2], qd[3]);
        let t = Translation::new(td[0], td[1], td[2]);
        let step = pose_to_matrix(&q, &t)?;
        let prev_pose = *poses.last().unwrap();
        poses.push(prev_pose.compose(&step));
        let inference_s = t0.elapsed().as_secs_f64();

        timings.push(PairTiming {
            data_prep_s,
            inference_s,
        });
        prev = next;
    }
    Ok((Trajectory(poses), timings))
}

pub fn timings_csv(timings: &[PairTiming]) -> String {
    let mut out = String::from("pair,data_prep_s,inference_s\n");
    for (i, t) in timings.iter().enumerate() {
        out.push_str(&format!("{i},{},{}\n", t.data_prep_s, t.inference_s));
    }
    out
}
