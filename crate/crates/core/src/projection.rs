//! Cylindrical projection of a point cloud onto an ordered H x W grid that
//! stores the raw XYZ coordinates per cell.
//!
//! The grid is an ordering of the cloud, not a lossy range image: every valid
//! cell holds an exact copy of one input point. Azimuth bins wrap around the
//! cylinder (column 0 and column W-1 are adjacent); elevation rows do not.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::geometry::Vec3;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("invalid projection config: {reason}")]
    BadConfig { reason: String },
    #[error("grid dump io: {0}")]
    Io(#[from] std::io::Error),
    #[error("grid dump malformed: {reason}")]
    MalformedDump { reason: String },
}

/// Geometry of the cylindrical grid. `height` rows span the vertical field
/// of view `[phi_min, phi_max]` (radians, `phi_max` at row 0); `width`
/// columns span the full 2 pi azimuth, so the bin width is `2 pi / width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    pub phi_max: f64,
    pub phi_min: f64,
}

impl ProjectionConfig {
    pub fn new(height: usize, width: usize, phi_min: f64, phi_max: f64) -> Result<Self, ProjectionError> {
        let cfg = Self {
            height,
            width,
            phi_max,
            phi_min,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// HDL-64E-like default: 64 x 1800 grid over [-24.8 deg, +2 deg].
    pub fn velodyne_64() -> Self {
        Self {
            height: 64,
            width: 1800,
            phi_max: 2.0f64.to_radians(),
            phi_min: -24.8f64.to_radians(),
        }
    }

    pub fn validate(&self) -> Result<(), ProjectionError> {
        if self.height < 1 || self.width < 1 {
            return Err(ProjectionError::BadConfig {
                reason: "height and width must be >= 1".into(),
            });
        }
        if !(self.phi_max > self.phi_min) {
            return Err(ProjectionError::BadConfig {
                reason: "phi_max must exceed phi_min".into(),
            });
        }
        Ok(())
    }

    /// Azimuth bin width; `delta_theta * width = 2 pi` by construction.
    pub fn delta_theta(&self) -> f64 {
        std::f64::consts::TAU / self.width as f64
    }

    pub fn delta_phi(&self) -> f64 {
        (self.phi_max - self.phi_min) / self.height as f64
    }

    /// Same field of view on a coarser grid (used for pyramid levels).
    pub fn with_dims(&self, height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            phi_max: self.phi_max,
            phi_min: self.phi_min,
        }
    }

    /// Azimuth bin before the seam shift, `floor(atan2(y, x) / dtheta)`.
    pub fn azimuth_bin_raw(&self, p: &Vec3) -> i64 {
        (p[1].atan2(p[0]) / self.delta_theta()).floor() as i64
    }

    /// Grid cell for a point, or `None` when the point sits at the origin or
    /// falls outside the vertical field of view. Column 0 is anchored half a
    /// turn from the +x axis so the azimuth seam sits behind the sensor.
    pub fn cell(&self, p: &Vec3) -> Option<(usize, usize)> {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if r <= 1e-12 {
            return None;
        }
        let u = wrap_column(self.azimuth_bin_raw(p) + self.width as i64 / 2, self.width);
        let phi = (p[2] / r).clamp(-1.0, 1.0).asin();
        let v = ((self.phi_max - phi) / self.delta_phi()).floor();
        if v < 0.0 || v >= self.height as f64 {
            return None;
        }
        Some((v as usize, u))
    }
}

/// Wraps a signed column index into `[0, width)`, so kernel windows can run
/// across the azimuth seam.
pub fn wrap_column(j: i64, width: usize) -> usize {
    let w = width as i64;
    (((j % w) + w) % w) as usize
}

/// Retains points with `max(|x|, |y|) <= half_side`.
pub fn crop_square(points: &[Vec3], half_side: f64) -> Vec<Vec3> {
    points
        .iter()
        .copied()
        .filter(|p| p[0].abs().max(p[1].abs()) <= half_side)
        .collect()
}

/// Drop/overwrite counters from one projection pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    pub input: usize,
    pub kept: usize,
    pub skipped_origin: usize,
    pub out_of_fov: usize,
    pub collisions: usize,
}

/// H x W grid of raw XYZ coordinates with a validity mask. `source[cell]`
/// is the index of the input point stored in a valid cell.
#[derive(Debug, Clone)]
pub struct ProjectedCloud {
    cfg: ProjectionConfig,
    coords: Vec<Vec3>,
    valid: Vec<bool>,
    source: Vec<u32>,
    count: usize,
}

impl ProjectedCloud {
    pub fn empty(cfg: ProjectionConfig) -> Self {
        let n = cfg.height * cfg.width;
        Self {
            cfg,
            coords: vec![[0.0; 3]; n],
            valid: vec![false; n],
            source: vec![u32::MAX; n],
            count: 0,
        }
    }

    pub fn config(&self) -> &ProjectionConfig {
        &self.cfg
    }

    pub fn height(&self) -> usize {
        self.cfg.height
    }

    pub fn width(&self) -> usize {
        self.cfg.width
    }

    /// Number of valid cells.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.cfg.width + col]
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&Vec3> {
        let idx = row * self.cfg.width + col;
        self.valid[idx].then(|| &self.coords[idx])
    }

    /// Input-point index stored at a valid cell.
    pub fn source(&self, row: usize, col: usize) -> Option<u32> {
        let idx = row * self.cfg.width + col;
        self.valid[idx].then(|| self.source[idx])
    }

    pub fn set_cell(&mut self, row: usize, col: usize, xyz: Vec3, source: u32) {
        let idx = row * self.cfg.width + col;
        if !self.valid[idx] {
            self.count += 1;
        }
        self.coords[idx] = xyz;
        self.valid[idx] = true;
        self.source[idx] = source;
    }

    /// Valid cells in row-major order.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, &Vec3)> + '_ {
        let w = self.cfg.width;
        self.valid.iter().enumerate().filter_map(move |(idx, v)| {
            v.then(|| (idx / w, idx % w, &self.coords[idx]))
        })
    }
}

/// Projects a cloud onto the cylindrical grid. When several points land in
/// one cell the nearest-range point wins (ties broken by the lowest input
/// index), matching the surface-visibility prior of a single scan.
pub fn project(points: &[Vec3], cfg: &ProjectionConfig) -> (ProjectedCloud, ProjectionStats) {
    let mut stats = ProjectionStats {
        input: points.len(),
        ..Default::default()
    };

    // Cell assignment is data-parallel; the min-range reduction below runs
    // sequentially in input order so results never depend on thread count.
    #[derive(Clone, Copy)]
    enum Binned {
        Origin,
        OutOfFov,
        Cell { idx: usize, range_sq: f64 },
    }
    let binned = exec::map(points.len(), |i| {
        let p = points[i];
        let r_sq = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        if r_sq <= 1e-24 {
            return Binned::Origin;
        }
        match cfg.cell(&p) {
            Some((row, col)) => Binned::Cell {
                idx: row * cfg.width + col,
                range_sq: r_sq,
            },
            None => Binned::OutOfFov,
        }
    });

    let mut best: Vec<u32> = vec![u32::MAX; cfg.height * cfg.width];
    let mut best_range: Vec<f64> = vec![f64::INFINITY; cfg.height * cfg.width];
    for (i, b) in binned.iter().enumerate() {
        match *b {
            Binned::Origin => stats.skipped_origin += 1,
            Binned::OutOfFov => stats.out_of_fov += 1,
            Binned::Cell { idx, range_sq } => {
                if best[idx] == u32::MAX {
                    best[idx] = i as u32;
                    best_range[idx] = range_sq;
                } else {
                    stats.collisions += 1;
                    if range_sq < best_range[idx] {
                        best[idx] = i as u32;
                        best_range[idx] = range_sq;
                    }
                }
            }
        }
    }

    let mut cloud = ProjectedCloud::empty(*cfg);
    for (idx, &src) in best.iter().enumerate() {
        if src != u32::MAX {
            cloud.coords[idx] = points[src as usize];
            cloud.valid[idx] = true;
            cloud.source[idx] = src;
            cloud.count += 1;
        }
    }
    stats.kept = cloud.count;
    (cloud, stats)
}

/// Writes the debug dump: `height`, `width` as little-endian u32, then
/// `height * width` cells of three little-endian f32 plus one validity byte.
pub fn write_grid_dump(cloud: &ProjectedCloud, mut w: impl Write) -> Result<(), ProjectionError> {
    w.write_all(&(cloud.height() as u32).to_le_bytes())?;
    w.write_all(&(cloud.width() as u32).to_le_bytes())?;
    for idx in 0..cloud.coords.len() {
        for k in 0..3 {
            w.write_all(&(cloud.coords[idx][k] as f32).to_le_bytes())?;
        }
        w.write_all(&[u8::from(cloud.valid[idx])])?;
    }
    Ok(())
}

/// Reads a grid dump produced by [`write_grid_dump`]. The vertical field of
/// view is not stored in the dump; the caller supplies it.
pub fn read_grid_dump(
    mut r: impl Read,
    phi_min: f64,
    phi_max: f64,
) -> Result<ProjectedCloud, ProjectionError> {
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let height = u32::from_le_bytes(buf4) as usize;
    r.read_exact(&mut buf4)?;
    let width = u32::from_le_bytes(buf4) as usize;
    let cfg = ProjectionConfig::new(height, width, phi_min, phi_max).map_err(|_| {
        ProjectionError::MalformedDump {
            reason: format!("bad grid dims {height}x{width}"),
        }
    })?;
    let mut cloud = ProjectedCloud::empty(cfg);
    let mut cell = [0u8; 13];
    for idx in 0..height * width {
        r.read_exact(&mut cell).map_err(|_| ProjectionError::MalformedDump {
            reason: format!("truncated at cell {idx}"),
        })?;
        let mut xyz = [0.0f64; 3];
        for (k, v) in xyz.iter_mut().enumerate() {
            *v = f32::from_le_bytes(cell[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        }
        match cell[12] {
            0 => {}
            1 => {
                cloud.coords[idx] = xyz;
                cloud.valid[idx] = true;
                cloud.count += 1;
            }
            b => {
                return Err(ProjectionError::MalformedDump {
                    reason: format!("validity byte {b} at cell {idx}"),
                })
            }
        }
    }
    Ok(cloud)
}
