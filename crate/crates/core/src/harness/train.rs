//! Training loop: batched forward/backward over frame pairs, Adam updates,
//! CSV logging and periodic checkpoints.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{synth_scene, HarnessError, SynthConfig};
use crate::exec;
use crate::geometry::{
    apply_augmentation, make_augmentation, matrix_to_pose, AugmentConfig, PoseMatrix, Quaternion,
    Translation, Vec3,
};
use crate::numeric::{
    write_checkpoint, AdamState, BoundParams, LrSchedule, ParamStore, Tape, Tensor,
};
use crate::odometry::{forward, pose_error_metrics, pose_loss, Model};
use crate::projection::{project, ProjectedCloud};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub augment: Option<AugmentConfig>,
    /// Checkpoint every N steps (0 = final only).
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub out_dir: PathBuf,
    /// Stop once every training pair beats `(rot_deg, trans_m)` at the
    /// finest level.
    pub stop_at: Option<(f64, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 1000,
            batch_size: 8,
            lr: LrSchedule::default(),
            augment: None,
            checkpoint_every: 0,
            log_every: 10,
            out_dir: PathBuf::from("train-out"),
            stop_at: None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Dataset {
    Synthetic {
        cfg: SynthConfig,
        pairs: usize,
    },
    Kitti {
        scan_dir: PathBuf,
        pose_file: PathBuf,
        extrinsic: Option<PoseMatrix>,
        half_side: f64,
        max_pairs: Option<usize>,
    },
}

/// One materialized training pair.
struct Pair {
    pc1_points: Vec<Vec3>,
    pc1: ProjectedCloud,
    pc2: ProjectedCloud,
    /// Ground truth as a matrix (so augmentation can compose onto it).
    t_p: PoseMatrix,
    q_gt: Quaternion,
    t_gt: Translation,
    /// Per raw frame-1 point: does it belong to an independently moving
    /// object (synthetic datasets only).
    dynamic1: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_curve: Vec<f64>,
    pub checkpoint: PathBuf,
    pub log_csv: PathBuf,
    /// Final per-pair `(rot_deg, trans_m)` at the finest level.
    pub final_errors: Vec<(f64, f64)>,
    /// Final per-pair mean mask weight split `(static, dynamic)` at the
    /// finest level; `dynamic` is NaN when the pair has no dynamic points.
    pub final_mask_split: Vec<(f64, f64)>,
}

fn pair_seed(seed: u64, pair: usize) -> u64 {
    seed ^ (pair as u64).wrapping_mul(0x9e3779b97f4a7c15)
}

fn materialize(dataset: &Dataset, model: &Model) -> Result<Vec<Pair>, HarnessError> {
    let mut pairs = Vec::new();
    match dataset {
        Dataset::Synthetic { cfg, pairs: n } => {
            for i in 0..*n {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
                let scene = synth_scene(cfg, &mut rng)?;
                let (pc1, _) = project(&scene.frame1, &model.cfg.projection);
                let (pc2, _) = project(&scene.frame2, &model.cfg.projection);
                let t_p = crate::geometry::pose_to_matrix(&scene.q_gt, &scene.t_gt)?;
                let dynamic1 = scene
                    .labels1
                    .iter()
                    .any(|l| l.is_dynamic())
                    .then(|| scene.labels1.iter().map(|l| l.is_dynamic()).collect());
                pairs.push(Pair {
                    pc1_points: scene.frame1,
                    pc1,
                    pc2,
                    t_p,
                    q_gt: scene.q_gt,
                    t_gt: scene.t_gt,
                    dynamic1,
                });
            }
        }
        Dataset::Kitti {
            scan_dir,
            pose_file,
            extrinsic,
            half_side,
            max_pairs,
        } => {
            let mut scans: Vec<PathBuf> = std::fs::read_dir(scan_dir)
                .map_err(|e| HarnessError::io(scan_dir, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|e| e == "bin"))
                .collect();
            scans.sort();
            let mut gt = super::load_poses(pose_file)?;
            if let Some(e) = extrinsic {
                gt = super::apply_extrinsic(&gt, e);
            }
            let n_pairs = scans
                .len()
                .saturating_sub(1)
                .min(gt.len().saturating_sub(1))
                .min(max_pairs.unwrap_or(usize::MAX));
            for i in 0..n_pairs {
                let p1 = super::load_scan(&scans[i], *half_side)?;
                let p2 = super::load_scan(&scans[i + 1], *half_side)?;
                let (pc1, _) = project(&p1, &model.cfg.projection);
                let (pc2, _) = project(&p2, &model.cfg.projection);
                let t_p = super::relative_pose(&gt.0[i], &gt.0[i + 1]);
                let (q_gt, t_gt) = matrix_to_pose(&t_p);
                pairs.push(Pair {
                    pc1_points: p1,
                    pc1,
                    pc2,
                    t_p,
                    q_gt,
                    t_gt,
                    dynamic1: None,
                });
            }
        }
    }
    if pairs.is_empty() {
        return Err(HarnessError::DatasetEmpty);
    }
    Ok(pairs)
}

struct SampleResult {
    loss: f64,
    grads: Vec<Tensor>,
    level_errors: Vec<(f64, f64)>,
}

fn run_sample(
    model: &Model,
    params: &ParamStore,
    pc1: &ProjectedCloud,
    pc2: &ProjectedCloud,
    q_gt: &Quaternion,
    t_gt: &Translation,
    seed: u64,
) -> Result<SampleResult, HarnessError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params)?;
    let out = forward(&mut tape, &bound, model, pc1, pc2, seed)?;
    let poses: Vec<_> = out.levels.iter().map(|l| (l.q, l.t)).collect();
    let s_x = bound.var("loss.s_x")?;
    let s_q = bound.var("loss.s_q")?;
    let loss = pose_loss(&mut tape, &poses, q_gt, t_gt, s_x, s_q, &model.cfg.alpha)?;
    let loss_val = tape.value(loss).item();
    tape.backward(loss)?;
    let grads = bound.gradients(&tape);
    let level_errors = out
        .levels
        .iter()
        .map(|l| pose_error_metrics(tape.value(l.q).data(), tape.value(l.t).data(), q_gt, t_gt))
        .collect();
    Ok(SampleResult {
        loss: loss_val,
        grads,
        level_errors,
    })
}

/// Evaluates the finest-level pose error and mask split on every pair with
/// the current parameters.
fn evaluate(
    model: &Model,
    params: &ParamStore,
    pairs: &[Pair],
    seed: u64,
) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>), HarnessError> {
    let mut errors = Vec::with_capacity(pairs.len());
    let mut mask_split = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params)?;
        let out = forward(&mut tape, &bound, model, &pair.pc1, &pair.pc2, pair_seed(seed, i))?;
        let fine = &out.levels[0];
        errors.push(pose_error_metrics(
            tape.value(fine.q).data(),
            tape.value(fine.t).data(),
            &pair.q_gt,
            &pair.t_gt,
        ));
        let split = match &pair.dynamic1 {
            Some(is_dynamic) => {
                let mask = tape.value(fine.mask);
                let c = mask.shape()[1];
                let sources = out.pyramid1[0].source_indices();
                let (mut s_sum, mut s_n, mut d_sum, mut d_n) = (0.0, 0usize, 0.0, 0usize);
                for (row, &src) in sources.iter().enumerate() {
                    let mean: f64 =
                        mask.data()[row * c..(row + 1) * c].iter().sum::<f64>() / c as f64;
                    if is_dynamic[src as usize] {
                        d_sum += mean;
                        d_n += 1;
                    } else {
                        s_sum += mean;
                        s_n += 1;
                    }
                }
                (
                    if s_n > 0 { s_sum / s_n as f64 } else { f64::NAN },
                    if d_n > 0 { d_sum / d_n as f64 } else { f64::NAN },
                )
            }
            None => (f64::NAN, f64::NAN),
        };
        mask_split.push(split);
    }
    Ok((errors, mask_split))
}

/// Runs training and writes `model.ckpt` plus `train_log.csv` into
/// `cfg.out_dir`. Synthetic pairs containing a dynamic object additionally
/// report the final static/dynamic mask-weight split per pair.
pub fn train(
    model: &Model,
    train_cfg: &TrainConfig,
    dataset: &Dataset,
) -> Result<TrainReport, HarnessError> {
    if let Some(aug) = &train_cfg.augment {
        aug.validate()?;
    }
    std::fs::create_dir_all(&train_cfg.out_dir)
        .map_err(|e| HarnessError::io(&train_cfg.out_dir, e))?;
    let pairs = materialize(dataset, model)?;
    let mut params = model.init_params(train_cfg.seed)?;
    let mut adam = AdamState::new(&params, train_cfg.lr);

    let n_levels = model.cfg.levels.len();
    let mut csv = String::from("step,loss,lr");
    for l in 0..n_levels {
        csv.push_str(&format!(",rot_deg_l{l},trans_m_l{l}"));
    }
    csv.push('\n');

    let mut loss_curve = Vec::new();
    let mut steps_run = 0;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0xa46);

    for step in 0..train_cfg.steps {
        // deterministic round-robin batch
        let b = train_cfg.batch_size.min(pairs.len());
        let batch: Vec<usize> = (0..b).map(|j| (step * b + j) % pairs.len()).collect();

        // optional augmentation re-projects frame 1 and folds the transform
        // into the pair's ground truth
        let inputs: Vec<(ProjectedCloud, ProjectedCloud, Quaternion, Translation, u64)> = batch
            .iter()
            .map(|&i| {
                let pair = &pairs[i];
                let sample_seed = pair_seed(train_cfg.seed, i);
                match &train_cfg.augment {
                    Some(aug) => {
                        let t_aug = make_augmentation(&mut aug_rng, aug);
                        let (pts, t_trans) = apply_augmentation(&pair.pc1_points, &pair.t_p, &t_aug);
                        let (pc1, _) = project(&pts, &model.cfg.projection);
                        let (q_gt, t_gt) = matrix_to_pose(&t_trans);
                        (pc1, pair.pc2.clone(), q_gt, t_gt, sample_seed)
                    }
                    None => (
                        pair.pc1.clone(),
                        pair.pc2.clone(),
                        pair.q_gt,
                        pair.t_gt,
                        sample_seed,
                    ),
                }
            })
            .collect();

        let results: Vec<SampleResult> = exec::try_map(inputs.len(), |j| {
            let (pc1, pc2, q_gt, t_gt, sample_seed) = &inputs[j];
            run_sample(model, &params, pc1, pc2, q_gt, t_gt, *sample_seed)
        })?;

        let mean_loss: f64 = results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64;
        if !mean_loss.is_finite() {
            return Err(HarnessError::NonFiniteLoss {
                step,
                diagnostics: format!(
                    "per-sample losses {:?}",
                    results.iter().map(|r| r.loss).collect::<Vec<_>>()
                ),
            });
        }
        loss_curve.push(mean_loss);

        // average gradients across the batch
        let mut grads = results[0].grads.clone();
        for r in &results[1..] {
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
        let scale = 1.0 / results.len() as f64;
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        adam.step(&mut params, &grads)?;
        steps_run = step + 1;

        if train_cfg.log_every > 0 && step % train_cfg.log_every == 0 {
            let mut mean_errs = vec![(0.0, 0.0); n_levels];
            for r in &results {
                for (l, &(rot, trans)) in r.level_errors.iter().enumerate() {
                    mean_errs[l].0 += rot / results.len() as f64;
                    mean_errs[l].1 += trans / results.len() as f64;
                }
            }
            csv.push_str(&format!("{step},{mean_loss},{}", adam.current_lr()));
            for (rot, trans) in &mean_errs {
                csv.push_str(&format!(",{rot},{trans}"));
            }
            csv.push('\n');
        }
        if train_cfg.checkpoint_every > 0 && (step + 1) % train_cfg.checkpoint_every == 0 {
            write_ckpt(&params, &train_cfg.out_dir.join(format!("step_{:06}.ckpt", step + 1)))?;
        }

        if let Some((rot_thresh, trans_thresh)) = train_cfg.stop_at {
            let batch_ok = results.iter().all(|r| {
                let (rot, trans) = r.level_errors[0];
                rot < rot_thresh && trans < trans_thresh
            });
            // only a full pass over the dataset can confirm
            if batch_ok && b >= pairs.len() {
                let (errors, _) = evaluate(model, &params, &pairs, train_cfg.seed)?;
                if errors
                    .iter()
                    .all(|&(rot, trans)| rot < rot_thresh && trans < trans_thresh)
                {
                    break;
                }
            }
        }
    }

    let checkpoint = train_cfg.out_dir.join("model.ckpt");
    write_ckpt(&params, &checkpoint)?;
    let log_csv = train_cfg.out_dir.join("train_log.csv");
    std::fs::write(&log_csv, &csv).map_err(|e| HarnessError::io(&log_csv, e))?;

    let (final_errors, final_mask_split) = evaluate(model, &params, &pairs, train_cfg.seed)?;
    Ok(TrainReport {
        steps_run,
        initial_loss: loss_curve.first().copied().unwrap_or(f64::NAN),
        final_loss: loss_curve.last().copied().unwrap_or(f64::NAN),
        loss_curve,
        checkpoint,
        log_csv,
        final_errors,
        final_mask_split,
    })
}

fn write_ckpt(params: &ParamStore, path: &Path) -> Result<(), HarnessError> {
    let file = std::fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    write_checkpoint(params, std::io::BufWriter::new(file))?;
    Ok(())
}

/// The loss value obtained by injecting given poses in place of network
/// output (used to pin the loss definition in tests).
pub fn loss_with_injected_poses(
    model: &Model,
    poses: &[(Quaternion, Translation)],
    q_gt: &Quaternion,
    t_gt: &Translation,
) -> Result<f64, HarnessError> {
    let mut tape = Tape::new();
    let vars: Vec<_> = poses
        .iter()
        .map(|(q, t)| {
            let qv = tape
                .constant(Tensor::from_vec(vec![q.w, q.x, q.y, q.z]))
                .unwrap();
            let tv = tape
                .constant(Tensor::from_vec(vec![t.tx, t.ty, t.tz]))
                .unwrap();
            (qv, tv)
        })
        .collect();
    let s_x = tape.leaf(Tensor::scalar(model.cfg.s_x_init))?;
    let s_q = tape.leaf(Tensor::scalar(model.cfg.s_q_init))?;
    let loss = pose_loss(&mut tape, &vars, q_gt, t_gt, s_x, s_q, &model.cfg.alpha)?;
    Ok(tape.value(loss).item())
}
