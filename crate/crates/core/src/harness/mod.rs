//! Data ingestion, synthetic scenes, the training loop, sequence inference,
//! trajectory metrics, benchmarks and the file-config surface behind the CLI.

mod benchrun;
mod config;
mod infer;
mod kitti;
mod metrics;
mod svg;
mod synth;
mod train;

pub use benchrun::{bench_grouping, GroupingBenchConfig, GroupingBenchReport, GroupingBenchRow};
pub use config::FileConfig;
pub use infer::{infer_sequence, timings_csv, PairTiming};
pub use kitti::{
    accumulate, apply_extrinsic, load_poses, load_scan, relative_pose, write_poses, Trajectory,
};
pub use metrics::{ate_rpe, kitti_metrics, trajectory_distances, KittiMetrics, MetricsReport};
pub use svg::{error_bars_svg, trajectory_svg};
pub use synth::{synth_scene, PointLabel, SynthConfig, SynthPair};
pub use train::{loss_with_injected_poses, train, Dataset, TrainConfig, TrainReport};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed scan {path}: byte length {len} is not a multiple of 16")]
    MalformedScan { path: String, len: usize },
    #[error("scan {path}: non-finite coordinate at point {index}")]
    NonFinitePoint { path: String, index: usize },
    #[error("pose file {path} line {line}: {reason}")]
    ParseError {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("trajectory too short: {reason}")]
    TrajectoryTooShort { reason: String },
    #[error("trajectories have different lengths: {pred} vs {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("dataset is empty")]
    DatasetEmpty,
    #[error("loss became non-finite at step {step}: {diagnostics}")]
    NonFiniteLoss { step: usize, diagnostics: String },
    #[error("bad harness config: {reason}")]
    BadConfig { reason: String },
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Numeric(#[from] crate::numeric::NumericError),
    #[error(transparent)]
    Odometry(#[from] crate::odometry::OdometryError),
    #[error(transparent)]
    Projection(#[from] crate::projection::ProjectionError),
    #[error(transparent)]
    PointOps(#[from] crate::pointops::PointOpsError),
}

impl HarnessError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
