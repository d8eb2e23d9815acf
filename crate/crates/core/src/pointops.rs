//! Grouped 3D operators on the projected grid.
//!
//! All sampling and grouping here works on grid neighborhoods instead of
//! global searches: centers come from fixed strides, candidate neighbors come
//! from a kernel window around a center's cell (columns wrap across the
//! azimuth seam, rows clip), and a Euclidean radius filter removes the
//! foreground/background leakage the window lets through. Feature
//! aggregation concatenates neighbor offsets and features, applies a shared
//! MLP and max-pools over the neighbor axis.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::geometry::Vec3;
use crate::numeric::{BoundMlp, NumericError, Tape, Tensor, Var};
use crate::projection::ProjectedCloud;

#[derive(Debug, Error)]
pub enum PointOpsError {
    #[error("no candidate survives the distance filter at center {center}")]
    EmptyNeighborhood { center: usize },
    #[error("bad operator config: {reason}")]
    BadConfig { reason: String },
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

/// How the K neighbors are drawn from the filtered candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    /// Uniform draw without replacement (with-replacement padding when fewer
    /// than K survive). The production path.
    Random,
    /// K nearest by 3D distance, ties broken by lower row-major cell index.
    Knn,
}

/// Per-level operator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelConfig {
    pub stride: (usize, usize),
    pub kernel: (usize, usize),
    pub neighbors: usize,
    pub radius: f64,
    pub mlp_widths: Vec<usize>,
    pub mode: SelectionMode,
}

impl LevelConfig {
    pub fn validate(&self) -> Result<(), PointOpsError> {
        if self.stride.0 < 1 || self.stride.1 < 1 {
            return Err(PointOpsError::BadConfig {
                reason: "strides must be >= 1".into(),
            });
        }
        if self.kernel.0 % 2 == 0 || self.kernel.1 % 2 == 0 {
            return Err(PointOpsError::BadConfig {
                reason: format!("kernel extents must be odd, got {:?}", self.kernel),
            });
        }
        if self.neighbors < 1 {
            return Err(PointOpsError::BadConfig {
                reason: "neighbor count must be >= 1".into(),
            });
        }
        if !(self.radius > 0.0) {
            return Err(PointOpsError::BadConfig {
                reason: "filter radius must be > 0".into(),
            });
        }
        Ok(())
    }
}

/// Marks a grid cell holding no point.
pub const NO_POINT: u32 = u32::MAX;

/// Compact row-major view of the valid cells of a grid: point `i` lives at
/// `cells[i]` with coordinates `xyz[i]`; `cell_to_point` inverts the map.
#[derive(Debug, Clone)]
pub struct CloudPoints {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<(usize, usize)>,
    pub xyz: Vec<Vec3>,
    pub cell_to_point: Vec<u32>,
}

impl CloudPoints {
    pub fn index(cloud: &ProjectedCloud) -> Self {
        let (h, w) = (cloud.height(), cloud.width());
        let mut cells = Vec::with_capacity(cloud.count());
        let mut xyz = Vec::with_capacity(cloud.count());
        let mut cell_to_point = vec![NO_POINT; h * w];
        for (row, col, p) in cloud.iter_valid() {
            cell_to_point[row * w + col] = cells.len() as u32;
            cells.push((row, col));
            xyz.push(*p);
        }
        Self {
            height: h,
            width: w,
            cells,
            xyz,
            cell_to_point,
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn xyz_tensor(&self) -> Tensor {
        Tensor::from_points(&self.xyz)
    }
}

/// Counter-based generator for one center's random draws, keyed by
/// `(seed, tag, ordinal)` so results are independent of scheduling.
pub fn selection_rng(seed: u64, tag: u64, ordinal: u64) -> ChaCha8Rng {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
    let key = splitmix(splitmix(seed ^ splitmix(tag)) ^ ordinal);
    ChaCha8Rng::seed_from_u64(key)
}

/// Center chosen by stride sampling: its slot in the coarse grid and its
/// cell in the source grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Center {
    pub slot: (usize, usize),
    pub src: (usize, usize),
    pub xyz: Vec3,
}

/// Stride-sampled level: the coarse grid plus the valid centers in slot
/// row-major order (the order every feature tensor at this level uses).
#[derive(Debug, Clone)]
pub struct SampledSet {
    pub stride: (usize, usize),
    pub cloud: ProjectedCloud,
    pub centers: Vec<Center>,
}

/// Picks centers at rows `{0, s_h, 2 s_h, ...}` and columns `{0, s_w, ...}`
/// of the source grid (floor partition, trailing remainder dropped). Invalid
/// source cells keep their slot invalid in the coarse grid.
pub fn stride_sample(cloud: &ProjectedCloud, s_h: usize, s_w: usize) -> SampledSet {
    assert!(s_h >= 1 && s_w >= 1, "strides must be >= 1");
    let rows = (cloud.height() / s_h).max(1);
    let cols = (cloud.width() / s_w).max(1);
    let coarse_cfg = cloud.config().with_dims(rows, cols);
    let mut coarse = ProjectedCloud::empty(coarse_cfg);
    let mut centers = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let (r, c) = (i * s_h, j * s_w);
            if let Some(xyz) = cloud.cell(r, c) {
                coarse.set_cell(i, j, *xyz, cloud.source(r, c).unwrap());
                centers.push(Center {
                    slot: (i, j),
                    src: (r, c),
                    xyz: *xyz,
                });
            }
        }
    }
    SampledSet {
        stride: (s_h, s_w),
        cloud: coarse,
        centers,
    }
}

/// Cells of the kernel window around `center` on an `h x w` grid: rows clip
/// to the grid, columns wrap modulo `w`. A window at least as wide as the
/// grid visits each column exactly once.
pub fn kernel_window(
    h: usize,
    w: usize,
    center: (usize, usize),
    kernel: (usize, usize),
) -> impl Iterator<Item = (usize, usize)> {
    let (kh, kw) = kernel;
    let r0 = center.0.saturating_sub(kh / 2);
    let r1 = (center.0 + kh / 2).min(h.saturating_sub(1));
    let cols: Vec<usize> = if kw >= w {
        (0..w).collect()
    } else {
        let c0 = center.1 as i64 - (kw / 2) as i64;
        (0..kw as i64)
            .map(move |d| crate::projection::wrap_column(c0 + d, w))
            .collect()
    };
    (r0..=r1).flat_map(move |r| cols.clone().into_iter().map(move |c| (r, c)))
}

/// A grouping candidate: compact point id, position, and the row-major cell
/// index used for deterministic tie-breaks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub point: u32,
    pub xyz: Vec3,
    pub cell_rm: u32,
}

/// Valid cells of `points` inside the kernel window around `center`.
pub fn window_candidates(
    points: &CloudPoints,
    center: (usize, usize),
    kernel: (usize, usize),
) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (r, c) in kernel_window(points.height, points.width, center, kernel) {
        let p = points.cell_to_point[r * points.width + c];
        if p != NO_POINT {
            out.push(Candidate {
                point: p,
                xyz: points.xyz[p as usize],
                cell_rm: (r * points.width + c) as u32,
            });
        }
    }
    out
}

/// Candidate sets for a whole [`SampledSet`], window-scanned on the source
/// grid (the batch form used by tests and oracles).
pub fn kernel_group(
    source: &CloudPoints,
    sampled: &SampledSet,
    kernel: (usize, usize),
) -> Vec<Vec<Candidate>> {
    sampled
        .centers
        .iter()
        .map(|ctr| window_candidates(source, ctr.src, kernel))
        .collect()
}

/// Exactly-K neighbor selection after the radius filter.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSet {
    pub members: Vec<u32>,
    pub mode: SelectionMode,
}

/// Drops candidates farther than `radius` from the center, then selects
/// exactly `k` of the survivors: uniformly without replacement in
/// [`SelectionMode::Random`] (padded with replacement when fewer than `k`
/// survive), or the `k` nearest in [`SelectionMode::Knn`] (ties by lower
/// row-major cell index, cyclic padding).
pub fn distance_filter_select(
    center_xyz: &Vec3,
    candidates: &[Candidate],
    radius: f64,
    k: usize,
    mode: SelectionMode,
    rng: &mut impl Rng,
) -> Result<NeighborSet, PointOpsError> {
    debug_assert!(radius > 0.0 && k >= 1);
    let r_sq = radius * radius;
    let mut survivors: Vec<(f64, u32, u32)> = candidates
        .iter()
        .filter_map(|cand| {
            let dx = cand.xyz[0] - center_xyz[0];
            let dy = cand.xyz[1] - center_xyz[1];
            let dz = cand.xyz[2] - center_xyz[2];
            let d_sq = dx * dx + dy * dy + dz * dz;
            (d_sq <= r_sq).then_some((d_sq, cand.cell_rm, cand.point))
        })
        .collect();
    if survivors.is_empty() {
        return Err(PointOpsError::EmptyNeighborhood { center: 0 });
    }
    let members = match mode {
        SelectionMode::Knn => {
            survivors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            (0..k).map(|i| survivors[i % survivors.len()].2).collect()
        }
        SelectionMode::Random => {
            let s = survivors.len();
            if s >= k {
                rand::seq::index::sample(rng, s, k)
                    .iter()
                    .map(|i| survivors[i].2)
                    .collect()
            } else {
                let mut members: Vec<u32> = survivors.iter().map(|c| c.2).collect();
                while members.len() < k {
                    members.push(survivors[rng.gen_range(0..s)].2);
                }
                members
            }
        }
    };
    Ok(NeighborSet { members, mode })
}

/// Neighbor ids per center for a set-conv level: window candidates around
/// each stride-sampled center, radius-filtered, then K-selected. The center
/// cell itself is one of its own candidates, so neighborhoods never empty.
pub fn select_conv_neighbors(
    source: &CloudPoints,
    sampled: &SampledSet,
    cfg: &LevelConfig,
    seed: u64,
    tag: u64,
) -> Result<Vec<NeighborSet>, PointOpsError> {
    cfg.validate()?;
    exec::try_map(sampled.centers.len(), |ci| {
        let ctr = &sampled.centers[ci];
        let cands = window_candidates(source, ctr.src, cfg.kernel);
        let mut rng = selection_rng(seed, tag, ci as u64);
        distance_filter_select(&ctr.xyz, &cands, cfg.radius, cfg.neighbors, cfg.mode, &mut rng)
            .map_err(|_| PointOpsError::EmptyNeighborhood { center: ci })
    })
}

fn flat_neighbor_indices(neighbors: &[NeighborSet]) -> Arc<Vec<usize>> {
    Arc::new(
        neighbors
            .iter()
            .flat_map(|n| n.members.iter().map(|&m| m as usize))
            .collect(),
    )
}

fn repeated_indices(ids: impl Iterator<Item = usize>, k: usize) -> Arc<Vec<usize>> {
    Arc::new(ids.flat_map(|i| std::iter::repeat(i).take(k)).collect())
}

/// Constant relative-coordinate tensor `[n, k, 3]` for constant clouds.
fn rel_coords_tensor(
    neighbors: &[NeighborSet],
    k: usize,
    neighbor_xyz: impl Fn(u32) -> Vec3,
    center_xyz: impl Fn(usize) -> Vec3,
) -> Tensor {
    let n = neighbors.len();
    let mut data = Vec::with_capacity(n * k * 3);
    for (ci, set) in neighbors.iter().enumerate() {
        let c = center_xyz(ci);
        for &m in &set.members {
            let p = neighbor_xyz(m);
            data.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
    }
    Tensor::new(vec![n, k, 3], data).unwrap()
}

/// Output of one set-conv level.
pub struct SetConvOutput {
    pub sampled: SampledSet,
    /// `[n_centers, c_out]`, rows aligned with `sampled.centers`.
    pub feats: Var,
    /// Neighbor choices, exposed for tests and oracles.
    pub neighbors: Vec<NeighborSet>,
}

/// The aggregation half of set conv: `max_k MLP((x_k - x_c) (+) f_k (+) f_c)`
/// over precomputed neighbor choices.
pub fn set_conv_aggregate(
    tape: &mut Tape,
    source: &CloudPoints,
    feats: Option<Var>,
    sampled: &SampledSet,
    neighbors: &[NeighborSet],
    k: usize,
    mlp: &BoundMlp,
) -> Result<Var, PointOpsError> {
    let n = sampled.centers.len();
    let rel = rel_coords_tensor(
        neighbors,
        k,
        |m| source.xyz[m as usize],
        |ci| sampled.centers[ci].xyz,
    );
    let rel = tape.constant(rel)?;

    let stacked = match feats {
        Some(f) => {
            let nbr_idx = flat_neighbor_indices(neighbors);
            let f_nbr = tape.gather_rows(f, nbr_idx)?;
            let c = *tape.value(f_nbr).shape().last().unwrap();
            let f_nbr = tape.reshape(f_nbr, vec![n, k, c])?;
            let ctr_idx = repeated_indices(
                sampled
                    .centers
                    .iter()
                    .map(|ctr| source.cell_to_point[ctr.src.0 * source.width + ctr.src.1] as usize),
                k,
            );
            let f_ctr = tape.gather_rows(f, ctr_idx)?;
            let f_ctr = tape.reshape(f_ctr, vec![n, k, c])?;
            tape.concat_last(&[rel, f_nbr, f_ctr])?
        }
        None => rel,
    };
    let encoded = mlp.apply(tape, stacked)?;
    let (pooled, _) = tape.max_axis1(encoded)?;
    Ok(pooled)
}

/// Hierarchical feature layer: stride-sample centers, group and filter
/// neighbors, then aggregate `max_k MLP((x_k - x_c) (+) f_k (+) f_c)`.
/// `feats` is `None` for the first pyramid level, where points carry no
/// features yet and only the offsets enter the MLP.
#[allow(clippy::too_many_arguments)]
pub fn set_conv(
    tape: &mut Tape,
    source_cloud: &ProjectedCloud,
    source: &CloudPoints,
    feats: Option<Var>,
    cfg: &LevelConfig,
    mlp: &BoundMlp,
    seed: u64,
    tag: u64,
) -> Result<SetConvOutput, PointOpsError> {
    let sampled = stride_sample(source_cloud, cfg.stride.0, cfg.stride.1);
    let neighbors = select_conv_neighbors(source, &sampled, cfg, seed, tag)?;
    let pooled = set_conv_aggregate(tape, source, feats, &sampled, &neighbors, cfg.neighbors, mlp)?;
    Ok(SetConvOutput {
        sampled,
        feats: pooled,
        neighbors,
    })
}

/// Set-upconv parameters: the window on the sparse grid plus the pre/post
/// aggregation MLP widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpconvConfig {
    pub kernel: (usize, usize),
    pub neighbors: usize,
    pub radius: f64,
    pub pre_widths: Vec<usize>,
    pub post_widths: Vec<usize>,
    pub mode: SelectionMode,
}

/// Propagates sparse-level features to every dense point. Each dense cell
/// locates a window on the sparse grid at its cell divided by the stride
/// (rows clipped, columns wrapped), filters candidates by 3D distance, and
/// aggregates like set conv followed by a post-pool MLP. A dense point whose
/// window holds no sparse point within the radius aggregates a single zero
/// row (offset 0, feature 0).
#[allow(clippy::too_many_arguments)]
pub fn set_upconv(
    tape: &mut Tape,
    dense: &CloudPoints,
    sparse: &CloudPoints,
    sparse_feats: Var,
    stride: (usize, usize),
    cfg: &UpconvConfig,
    pre_mlp: &BoundMlp,
    post_mlp: &BoundMlp,
    seed: u64,
    tag: u64,
) -> Result<(Var, usize), PointOpsError> {
    if cfg.kernel.0 % 2 == 0 || cfg.kernel.1 % 2 == 0 {
        return Err(PointOpsError::BadConfig {
            reason: format!("kernel extents must be odd, got {:?}", cfg.kernel),
        });
    }
    let n = dense.len();
    let k = cfg.neighbors;
    let selections: Vec<Option<NeighborSet>> = exec::map(n, |i| {
        let (r, c) = dense.cells[i];
        let win_center = (
            (r / stride.0).min(sparse.height.saturating_sub(1)),
            crate::projection::wrap_column((c / stride.1) as i64, sparse.width),
        );
        let cands = window_candidates(sparse, win_center, cfg.kernel);
        let mut rng = selection_rng(seed, tag, i as u64);
        distance_filter_select(&dense.xyz[i], &cands, cfg.radius, k, cfg.mode, &mut rng).ok()
    });
    let empty_count = selections.iter().filter(|s| s.is_none()).count();

    let mut rel = vec![0.0; n * k * 3];
    let mut idx = vec![crate::numeric::GATHER_PAD; n * k];
    for (i, sel) in selections.iter().enumerate() {
        if let Some(set) = sel {
            for (slot, &m) in set.members.iter().enumerate() {
                let p = sparse.xyz[m as usize];
                let c = dense.xyz[i];
                let base = (i * k + slot) * 3;
                rel[base] = p[0] - c[0];
                rel[base + 1] = p[1] - c[1];
                rel[base + 2] = p[2] - c[2];
                idx[i * k + slot] = m as usize;
            }
        }
    }
    let rel = tape.constant(Tensor::new(vec![n, k, 3], rel)?)?;
    let gathered = tape.gather_rows(sparse_feats, Arc::new(idx))?;
    let c = *tape.value(gathered).shape().last().unwrap();
    let gathered = tape.reshape(gathered, vec![n, k, c])?;
    let cat = tape.concat_last(&[rel, gathered])?;
    let pre = pre_mlp.apply(tape, cat)?;
    let (pooled, _) = tape.max_axis1(pre)?;
    let out = post_mlp.apply(tape, pooled)?;
    Ok((out, empty_count))
}

/// Attentive cost volume parameters. Stage 1 takes the `k1` nearest target
/// points inside the window; stage 2 re-aggregates the stage-1 embeddings
/// over `k2` randomly selected query-side neighbors in a ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostVolumeConfig {
    pub kernel: (usize, usize),
    pub k1: usize,
    pub k2: usize,
    pub radius: f64,
    pub value_widths: Vec<usize>,
    pub attn_widths: Vec<usize>,
}

/// The two attention/value MLP pairs of a cost volume. Stage inputs have
/// different widths (local features vs stage-1 embeddings), so the stages
/// hold separate parameters.
pub struct CostVolumeWeights<'a> {
    pub attn1: &'a BoundMlp,
    pub value1: &'a BoundMlp,
    pub attn2: &'a BoundMlp,
    pub value2: &'a BoundMlp,
}

/// Query side of the cost volume. `cells` places each query point on the
/// shared level grid (for a warped cloud: the cell of its re-projection) and
/// `grid_cell_to_query` maps grid cells back to query ordinals for the
/// stage-2 grouping; points displaced by a grid collision stay queryable,
/// they just stop being findable as neighbors.
pub struct CostVolumeQuery<'a> {
    pub xyz: Var,
    pub feats: Var,
    pub cells: &'a [(usize, usize)],
    pub grid_height: usize,
    pub grid_width: usize,
    pub grid_cell_to_query: &'a [u32],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostVolumeStats {
    /// Stage-1 windows that were empty and fell back to the whole-row scan.
    pub row_fallbacks: usize,
    /// Row scans that were still empty and fell back to the whole grid.
    pub grid_fallbacks: usize,
}

/// Result of [`attentive_cost_volume`]: embeddings aligned with the query
/// ordering, the attention weights of both stages, and fallback stats.
pub struct CostVolumeOutput {
    pub embeddings: Var,
    pub w1: Var,
    pub w2: Var,
    pub stage1_neighbors: Vec<Vec<u32>>,
    pub stage2_neighbors: Vec<NeighborSet>,
    pub stats: CostVolumeStats,
}

/// Two-stage attention-weighted correlation of two clouds; returns one
/// embedding per query point, aligned with the query ordering.
pub fn attentive_cost_volume(
    tape: &mut Tape,
    query: &CostVolumeQuery<'_>,
    target: &CloudPoints,
    target_feats: Var,
    cfg: &CostVolumeConfig,
    weights: &CostVolumeWeights<'_>,
    seed: u64,
    tag: u64,
) -> Result<CostVolumeOutput, PointOpsError> {
    if cfg.k1 < 1 || cfg.k2 < 1 {
        return Err(PointOpsError::BadConfig {
            reason: "cost volume needs k1, k2 >= 1".into(),
        });
    }
    let n = query.cells.len();
    if target.is_empty() {
        return Err(PointOpsError::EmptyNeighborhood { center: 0 });
    }
    let query_xyz: Vec<Vec3> = tape
        .value(query.xyz)
        .data()
        .chunks(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();

    // Stage 1: nearest k1 target points, searched inside the window.
    #[derive(Default)]
    struct Stage1 {
        members: Vec<u32>,
        row_fallback: bool,
        grid_fallback: bool,
    }
    let stage1: Vec<Stage1> = exec::map(n, |i| {
        let center = query.cells[i];
        let cx = &query_xyz[i];
        let knn = |cands: &[Candidate]| -> Vec<u32> {
            let mut scored: Vec<(f64, u32, u32)> = cands
                .iter()
                .map(|cand| {
                    let d = (cand.xyz[0] - cx[0]).powi(2)
                        + (cand.xyz[1] - cx[1]).powi(2)
                        + (cand.xyz[2] - cx[2]).powi(2);
                    (d, cand.cell_rm, cand.point)
                })
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            (0..cfg.k1).map(|j| scored[j % scored.len()].2).collect()
        };
        let cands = window_candidates(target, center, cfg.kernel);
        if !cands.is_empty() {
            return Stage1 {
                members: knn(&cands),
                ..Default::default()
            };
        }
        // window empty: scan the same rows across every column
        let row_cands = window_candidates(target, center, (cfg.kernel.0, 2 * target.width + 1));
        if !row_cands.is_empty() {
            return Stage1 {
                members: knn(&row_cands),
                row_fallback: true,
                ..Default::default()
            };
        }
        // still empty: the whole cloud (nonempty, checked above)
        let all: Vec<Candidate> = (0..target.len())
            .map(|p| Candidate {
                point: p as u32,
                xyz: target.xyz[p],
                cell_rm: (target.cells[p].0 * target.width + target.cells[p].1) as u32,
            })
            .collect();
        Stage1 {
            members: knn(&all),
            row_fallback: true,
            grid_fallback: true,
        }
    });
    let stats = CostVolumeStats {
        row_fallbacks: stage1.iter().filter(|s| s.row_fallback).count(),
        grid_fallbacks: stage1.iter().filter(|s| s.grid_fallback).count(),
    };

    let k1 = cfg.k1;
    let nbr_idx: Arc<Vec<usize>> = Arc::new(
        stage1
            .iter()
            .flat_map(|s| s.members.iter().map(|&m| m as usize))
            .collect(),
    );
    let target_xyz = tape.constant(target.xyz_tensor())?;
    let y = tape.gather_rows(target_xyz, Arc::clone(&nbr_idx))?;
    let y = tape.reshape(y, vec![n, k1, 3])?;
    let ctr_idx = repeated_indices(0..n, k1);
    let x_b = tape.gather_rows(query.xyz, Arc::clone(&ctr_idx))?;
    let x_b = tape.reshape(x_b, vec![n, k1, 3])?;
    let rel = tape.sub(y, x_b)?;
    let f_i = tape.gather_rows(query.feats, ctr_idx)?;
    let cq = *tape.value(f_i).shape().last().unwrap();
    let f_i = tape.reshape(f_i, vec![n, k1, cq])?;
    let g = tape.gather_rows(target_feats, nbr_idx)?;
    let ct = *tape.value(g).shape().last().unwrap();
    let g = tape.reshape(g, vec![n, k1, ct])?;
    let cat = tape.concat_last(&[rel, f_i, g])?;
    let logits = weights.attn1.apply(tape, cat)?;
    let w1 = tape.softmax_axis(logits, 1)?;
    let values = weights.value1.apply(tape, cat)?;
    let weighted = tape.mul(w1, values)?;
    let pe = tape.sum_axis1(weighted)?;

    // Stage 2: random-in-ball regrouping of the stage-1 embeddings within
    // the query cloud; the center itself always counts as a candidate.
    let k2 = cfg.k2;
    let stage2: Vec<NeighborSet> = exec::try_map(n, |i| {
        let center = query.cells[i];
        let mut cands: Vec<Candidate> = Vec::new();
        let mut saw_center = false;
        for (r, c) in kernel_window(query.grid_height, query.grid_width, center, cfg.kernel) {
            let p = query.grid_cell_to_query[r * query.grid_width + c];
            if p != NO_POINT {
                saw_center |= p as usize == i;
                cands.push(Candidate {
                    point: p,
                    xyz: query_xyz[p as usize],
                    cell_rm: (r * query.grid_width + c) as u32,
                });
            }
        }
        if !saw_center {
            cands.push(Candidate {
                point: i as u32,
                xyz: query_xyz[i],
                cell_rm: (center.0 * query.grid_width + center.1) as u32,
            });
        }
        let mut rng = selection_rng(seed, tag ^ 0x5747, i as u64);
        distance_filter_select(
            &query_xyz[i],
            &cands,
            cfg.radius,
            k2,
            SelectionMode::Random,
            &mut rng,
        )
        .map_err(|_| PointOpsError::EmptyNeighborhood { center: i })
    })?;

    let nbr2: Arc<Vec<usize>> = flat_neighbor_indices(&stage2);
    let xk = tape.gather_rows(query.xyz, Arc::clone(&nbr2))?;
    let xk = tape.reshape(xk, vec![n, k2, 3])?;
    let ctr2 = repeated_indices(0..n, k2);
    let xc = tape.gather_rows(query.xyz, Arc::clone(&ctr2))?;
    let xc = tape.reshape(xc, vec![n, k2, 3])?;
    let rel2 = tape.sub(xk, xc)?;
    let pe_c = tape.gather_rows(pe, ctr2)?;
    let cv = *tape.value(pe_c).shape().last().unwrap();
    let pe_c = tape.reshape(pe_c, vec![n, k2, cv])?;
    let pe_k = tape.gather_rows(pe, nbr2)?;
    let pe_k = tape.reshape(pe_k, vec![n, k2, cv])?;
    let cat2 = tape.concat_last(&[rel2, pe_c, pe_k])?;
    let logits2 = weights.attn2.apply(tape, cat2)?;
    let w2 = tape.softmax_axis(logits2, 1)?;
    let values2 = weights.value2.apply(tape, cat2)?;
    let weighted2 = tape.mul(w2, values2)?;
    let e = tape.sum_axis1(weighted2)?;
    Ok(CostVolumeOutput {
        embeddings: e,
        w1,
        w2,
        stage1_neighbors: stage1.into_iter().map(|s| s.members).collect(),
        stage2_neighbors: stage2,
        stats,
    })
}
