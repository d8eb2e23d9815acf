//! TOML file-config surface covering every network/scene/augmentation field
//! the CLI exposes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, HarnessError, SynthConfig, TrainConfig};
use crate::geometry::AugmentConfig;
use crate::numeric::LrSchedule;
use crate::odometry::NetworkConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay: f64,
    pub lr_interval: u64,
    pub lr_floor: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub augment: bool,
    /// "synthetic" or "kitti".
    pub dataset: String,
    pub synthetic_pairs: usize,
    pub scan_dir: Option<PathBuf>,
    pub pose_file: Option<PathBuf>,
    pub max_pairs: Option<usize>,
    pub stop_rot_deg: Option<f64>,
    pub stop_trans_m: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr_initial: 1e-3,
            lr_decay: 0.7,
            lr_interval: 200_000,
            lr_floor: 1e-5,
            checkpoint_every: 0,
            log_every: 10,
            augment: false,
            dataset: "synthetic".into(),
            synthetic_pairs: 8,
            scan_dir: None,
            pose_file: None,
            max_pairs: None,
            stop_rot_deg: None,
            stop_trans_m: None,
        }
    }
}

/// Everything a run needs, loadable from one TOML file. `seed` and
/// `threads` can be overridden by environment variables and flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    /// Square crop half-side applied to loaded scans, meters.
    pub half_side: f64,
    pub network: NetworkConfig,
    pub synth: SynthConfig,
    pub augment: AugmentConfig,
    pub train: TrainSection,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: None,
            half_side: 15.0,
            network: NetworkConfig::kitti(),
            synth: SynthConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainSection::default(),
        }
    }
}

impl FileConfig {
    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        toml::from_str(&text).map_err(|e| HarnessError::BadConfig {
            reason: format!("{}: {e}", path.display()),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn train_config(&self, out_dir: PathBuf) -> TrainConfig {
        let stop_at = match (self.train.stop_rot_deg, self.train.stop_trans_m) {
            (Some(r), Some(t)) => Some((r, t)),
            _ => None,
        };
        TrainConfig {
            seed: self.seed,
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            lr: LrSchedule {
                initial: self.train.lr_initial,
                decay: self.train.lr_decay,
                interval: self.train.lr_interval,
                floor: self.train.lr_floor,
            },
            augment: self.train.augment.then_some(self.augment),
            checkpoint_every: self.train.checkpoint_every,
            log_every: self.train.log_every,
            out_dir,
            stop_at,
        }
    }

    pub fn dataset(&self) -> Result<Dataset, HarnessError> {
        match self.train.dataset.as_str() {
            "synthetic" => Ok(Dataset::Synthetic {
                cfg: SynthConfig {
                    seed: self.seed,
                    ..self.synth.clone()
                },
                pairs: self.train.synthetic_pairs,
            }),
            "kitti" => {
                let scan_dir = self.train.scan_dir.clone().ok_or(HarnessError::BadConfig {
                    reason: "kitti dataset needs train.scan_dir".into(),
                })?;
                let pose_file = self.train.pose_file.clone().ok_or(HarnessError::BadConfig {
                    reason: "kitti dataset needs train.pose_file".into(),
                })?;
                Ok(Dataset::Kitti {
                    scan_dir,
                    pose_file,
                    extrinsic: None,
                    half_side: self.half_side,
                    max_pairs: self.train.max_pairs,
                })
            }
            other => Err(HarnessError::BadConfig {
                reason: format!("unknown dataset kind {other:?}"),
            }),
        }
    }
}
