//! Projection-aware LiDAR odometry.
//!
//! The pipeline organizes raw LiDAR sweeps into a cylindrical H x W grid of
//! raw XYZ coordinates ([`projection`]), runs grouped 3D operators on that
//! grid ([`pointops`]), and regresses a frame-to-frame rigid pose with a
//! coarse-to-fine network ([`odometry`]) built on a small reverse-mode tensor
//! engine ([`numeric`]). [`harness`] holds dataset IO, synthetic scenes, the
//! training loop, sequence inference, trajectory metrics and benchmarks.

pub mod exec;
pub mod geometry;
pub mod harness;
pub mod numeric;
pub mod odometry;
pub mod pointops;
pub mod projection;
