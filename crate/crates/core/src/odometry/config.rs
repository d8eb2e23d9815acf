//! Network configuration: projection geometry, per-level operator
//! parameters, cost-volume and upconv templates, and loss weights.

use serde::{Deserialize, Serialize};

use super::OdometryError;
use crate::pointops::{CostVolumeConfig, LevelConfig, SelectionMode, UpconvConfig};
use crate::projection::ProjectionConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub projection: ProjectionConfig,
    /// Pyramid levels, index 0 = finest. At least two.
    pub levels: Vec<LevelConfig>,
    /// Downsamples the penultimate-level embeddings onto the coarsest grid
    /// before the first mask/pose heads; stride must match the last pyramid
    /// level so the grids align.
    pub embed_conv: LevelConfig,
    /// Cost volume producing the first embeddings (penultimate level).
    pub initial_cv: CostVolumeConfig,
    /// Template for the re-embedding cost volumes; the per-level filter
    /// radius comes from `levels[l].radius`.
    pub refine_cv: CostVolumeConfig,
    /// Template for the embedding/mask upconvs; the per-level radius comes
    /// from the sparse side, `levels[l + 1].radius`.
    pub upconv: UpconvConfig,
    pub embed_mlp_widths: Vec<usize>,
    pub mask_mlp_widths: Vec<usize>,
    /// Per-level loss weights, index 0 = finest; one per pyramid level.
    pub alpha: Vec<f64>,
    pub s_x_init: f64,
    pub s_q_init: f64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), OdometryError> {
        if self.levels.len() < 2 {
            return Err(OdometryError::BadConfig {
                reason: "need at least two pyramid levels".into(),
            });
        }
        if self.alpha.len() != self.levels.len() {
            return Err(OdometryError::BadConfig {
                reason: format!(
                    "{} loss weights for {} levels",
                    self.alpha.len(),
                    self.levels.len()
                ),
            });
        }
        for (l, level) in self.levels.iter().enumerate() {
            level.validate().map_err(|e| OdometryError::BadConfig {
                reason: format!("level {l}: {e}"),
            })?;
            if level.mlp_widths.is_empty() {
                return Err(OdometryError::BadConfig {
                    reason: format!("level {l} has no MLP widths"),
                });
            }
        }
        if self.embed_conv.stride != self.levels.last().unwrap().stride {
            return Err(OdometryError::BadConfig {
                reason: "embed_conv stride must match the coarsest pyramid stride".into(),
            });
        }
        let c = self.embed_dim();
        let consistent = [
            *self.embed_conv.mlp_widths.last().unwrap_or(&0),
            *self.initial_cv.value_widths.last().unwrap_or(&0),
            *self.refine_cv.value_widths.last().unwrap_or(&0),
            *self.embed_mlp_widths.last().unwrap_or(&0),
            *self.mask_mlp_widths.last().unwrap_or(&0),
            *self.upconv.post_widths.last().unwrap_or(&0),
            *self.initial_cv.attn_widths.last().unwrap_or(&0),
            *self.refine_cv.attn_widths.last().unwrap_or(&0),
        ];
        if consistent.iter().any(|&w| w != c) {
            return Err(OdometryError::BadConfig {
                reason: format!("embedding widths disagree: {consistent:?}"),
            });
        }
        self.projection.validate().map_err(OdometryError::from)?;
        Ok(())
    }

    /// Common embedding channel count (mask, embeddings and cost-volume
    /// values all share it so the elementwise products line up).
    pub fn embed_dim(&self) -> usize {
        *self.embed_mlp_widths.last().unwrap_or(&0)
    }

    /// Local feature width of pyramid level `l`.
    pub fn feat_dim(&self, l: usize) -> usize {
        *self.levels[l].mlp_widths.last().unwrap()
    }

    /// Grid dims per level for a given full-resolution input.
    pub fn level_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.levels.len());
        let (mut h, mut w) = (self.projection.height, self.projection.width);
        for level in &self.levels {
            h = (h / level.stride.0).max(1);
            w = (w / level.stride.1).max(1);
            dims.push((h, w));
        }
        dims
    }

    /// Full-scale configuration for 64 x 1800 Velodyne sweeps.
    pub fn kitti() -> Self {
        let level = |stride, kernel, k, radius, widths: &[usize]| LevelConfig {
            stride,
            kernel,
            neighbors: k,
            radius,
            mlp_widths: widths.to_vec(),
            mode: SelectionMode::Random,
        };
        Self {
            projection: ProjectionConfig::velodyne_64(),
            levels: vec![
                level((4, 8), (9, 15), 32, 0.75, &[8, 8, 16]),
                level((2, 2), (7, 11), 32, 3.0, &[16, 16, 32]),
                level((2, 2), (7, 11), 16, 6.0, &[32, 32, 64]),
                level((1, 2), (7, 11), 16, 12.0, &[64, 64, 128]),
            ],
            embed_conv: level((1, 2), (5, 9), 16, 12.0, &[128, 64, 64]),
            initial_cv: CostVolumeConfig {
                kernel: (5, 9),
                k1: 4,
                k2: 32,
                radius: 6.0,
                value_widths: vec![128, 64, 64],
                attn_widths: vec![128, 64],
            },
            refine_cv: CostVolumeConfig {
                kernel: (5, 9),
                k1: 4,
                k2: 6,
                radius: 6.0,
                value_widths: vec![128, 64, 64],
                attn_widths: vec![128, 64],
            },
            upconv: UpconvConfig {
                kernel: (5, 9),
                neighbors: 8,
                radius: 6.0,
                pre_widths: vec![128, 64],
                post_widths: vec![64],
                mode: SelectionMode::Random,
            },
            embed_mlp_widths: vec![128, 64],
            mask_mlp_widths: vec![128, 64],
            alpha: vec![1.6, 0.8, 0.4, 0.2],
            s_x_init: 0.0,
            s_q_init: -2.5,
        }
    }

    /// Full four-level architecture at desk scale: a 16 x 256 grid with
    /// narrower MLPs and smaller neighbor counts, sized for single-core
    /// training runs.
    pub fn reduced_16x256() -> Self {
        let level = |stride, kernel, k, radius, widths: &[usize]| LevelConfig {
            stride,
            kernel,
            neighbors: k,
            radius,
            mlp_widths: widths.to_vec(),
            mode: SelectionMode::Random,
        };
        Self {
            projection: ProjectionConfig {
                height: 16,
                width: 256,
                phi_max: 2.0f64.to_radians(),
                phi_min: -24.8f64.to_radians(),
            },
            // the coarse grids keep two rows so the chain never depends on
            // the topmost (upward-looking, often empty) elevation band
            levels: vec![
                level((4, 8), (5, 9), 12, 2.0, &[4, 4, 8]),
                level((2, 2), (5, 7), 12, 4.0, &[8, 8, 16]),
                level((1, 2), (3, 7), 8, 8.0, &[16, 16, 32]),
                level((1, 2), (3, 7), 8, 16.0, &[32, 32, 64]),
            ],
            embed_conv: level((1, 2), (3, 7), 8, 16.0, &[64, 32, 32]),
            initial_cv: CostVolumeConfig {
                kernel: (3, 7),
                k1: 4,
                k2: 12,
                radius: 8.0,
                value_widths: vec![64, 32, 32],
                attn_widths: vec![64, 32],
            },
            refine_cv: CostVolumeConfig {
                kernel: (3, 7),
                k1: 4,
                k2: 6,
                radius: 8.0,
                value_widths: vec![64, 32, 32],
                attn_widths: vec![64, 32],
            },
            upconv: UpconvConfig {
                kernel: (3, 7),
                neighbors: 6,
                radius: 8.0,
                pre_widths: vec![64, 32],
                post_widths: vec![32],
                mode: SelectionMode::Random,
            },
            embed_mlp_widths: vec![64, 32],
            mask_mlp_widths: vec![64, 32],
            alpha: vec![1.6, 0.8, 0.4, 0.2],
            s_x_init: 0.0,
            s_q_init: -2.5,
        }
    }

    /// Two-level toy network on an 8 x 32 grid, small enough for
    /// finite-difference checks of the whole forward pass.
    pub fn toy_two_level() -> Self {
        let level = |stride, kernel, k, radius, widths: &[usize]| LevelConfig {
            stride,
            kernel,
            neighbors: k,
            radius,
            mlp_widths: widths.to_vec(),
            mode: SelectionMode::Random,
        };
        Self {
            projection: ProjectionConfig {
                height: 8,
                width: 32,
                phi_max: 2.0f64.to_radians(),
                phi_min: -24.8f64.to_radians(),
            },
            levels: vec![
                level((2, 4), (3, 5), 4, 4.0, &[4, 6]),
                level((2, 2), (3, 5), 4, 8.0, &[6, 8]),
            ],
            embed_conv: level((2, 2), (3, 5), 4, 8.0, &[8, 6]),
            initial_cv: CostVolumeConfig {
                kernel: (3, 5),
                k1: 2,
                k2: 4,
                radius: 6.0,
                value_widths: vec![8, 6],
                attn_widths: vec![8, 6],
            },
            refine_cv: CostVolumeConfig {
                kernel: (3, 5),
                k1: 2,
                k2: 3,
                radius: 6.0,
                value_widths: vec![8, 6],
                attn_widths: vec![8, 6],
            },
            upconv: UpconvConfig {
                kernel: (3, 5),
                neighbors: 4,
                radius: 8.0,
                pre_widths: vec![8, 6],
                post_widths: vec![6],
                mode: SelectionMode::Random,
            },
            embed_mlp_widths: vec![8, 6],
            mask_mlp_widths: vec![8, 6],
            alpha: vec![1.6, 0.8],
            s_x_init: 0.0,
            s_q_init: -2.5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        NetworkConfig::kitti().validate().unwrap();
        NetworkConfig::reduced_16x256().validate().unwrap();
        NetworkConfig::toy_two_level().validate().unwrap();
    }

    #[test]
    fn kitti_level_dims_follow_stride_chain() {
        let dims = NetworkConfig::kitti().level_dims();
        assert_eq!(dims, vec![(16, 225), (8, 112), (4, 56), (4, 28)]);
    }

    #[test]
    fn mismatched_alpha_rejected() {
        let mut cfg = NetworkConfig::toy_two_level();
        cfg.alpha = vec![1.6];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mismatched_embed_stride_rejected() {
        let mut cfg = NetworkConfig::toy_two_level();
        cfg.embed_conv.stride = (1, 1);
        assert!(cfg.validate().is_err());
    }
}
