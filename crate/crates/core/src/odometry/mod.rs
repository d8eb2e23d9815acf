//! The full odometry network: siamese feature pyramid over two projected
//! frames, an attentive cost volume at the penultimate level, an initial
//! embedding mask and pose at the coarsest level, and iterative pose
//! warp-refinement back to the finest level. Poses from every level feed the
//! multi-scale training loss.

mod config;
mod loss;
mod model;

pub use config::NetworkConfig;
pub use loss::{pose_error_metrics, pose_loss, sign_matched_gt};
pub use model::{
    feature_pyramid, forward, initial_mask_and_pose, pose_warp_level, warp_refine_level,
    ForwardOutput, ForwardStats, LevelOutput, Model, PyramidLevel, WarpedLevel,
};

use thiserror::Error;

use crate::geometry::GeometryError;
use crate::numeric::NumericError;
use crate::pointops::PointOpsError;
use crate::projection::ProjectionError;

#[derive(Debug, Error)]
pub enum OdometryError {
    #[error("pyramid level {level} has no valid points")]
    EmptyLevel { level: usize },
    #[error("bad network config: {reason}")]
    BadConfig { reason: String },
    #[error(transparent)]
    PointOps(#[from] PointOpsError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
}
