//! Parameter layout and the forward pass.

use serde::{Deserialize, Serialize};

use super::{NetworkConfig, OdometryError};
use crate::numeric::{BoundMlp, BoundParams, MlpSpec, ParamStore, Tape, Tensor, Var};
use crate::pointops::{
    attentive_cost_volume, set_conv, set_upconv, CloudPoints, CostVolumeConfig, CostVolumeQuery,
    CostVolumeWeights, SampledSet, UpconvConfig, NO_POINT,
};
use crate::projection::{ProjectedCloud, ProjectionConfig};

/// One pyramid level of one frame: the sampled grid, its compact point view
/// and the aggregated features (rows aligned with the point view).
pub struct PyramidLevel {
    pub sampled: SampledSet,
    pub points: CloudPoints,
    pub feats: Var,
}

impl PyramidLevel {
    /// Original input-point index behind each level point, in row order.
    pub fn source_indices(&self) -> Vec<u32> {
        self.points
            .cells
            .iter()
            .map(|&(r, c)| self.sampled.cloud.source(r, c).unwrap())
            .collect()
    }
}

/// Pose and mask emitted at one level.
pub struct LevelOutput {
    pub q: Var,
    pub t: Var,
    pub mask: Var,
    pub embeddings: Var,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardStats {
    pub cv_row_fallbacks: usize,
    pub cv_grid_fallbacks: usize,
    pub warp_out_of_fov: usize,
    pub warp_collisions: usize,
    pub upconv_empty: usize,
}

pub struct ForwardOutput {
    /// Per-level outputs, index 0 = finest.
    pub levels: Vec<LevelOutput>,
    /// Frame-1 pyramid (the side masks and poses live on).
    pub pyramid1: Vec<PyramidLevel>,
    pub stats: ForwardStats,
}

struct CvSpecs {
    attn1: MlpSpec,
    value1: MlpSpec,
    attn2: MlpSpec,
    value2: MlpSpec,
}

impl CvSpecs {
    fn new(prefix: &str, stage1_in: usize, cfg: &CostVolumeConfig) -> Self {
        let c = *cfg.value_widths.last().unwrap();
        let stage2_in = 3 + 2 * c;
        Self {
            attn1: MlpSpec::new(format!("{prefix}.a1"), stage1_in, &cfg.attn_widths),
            value1: MlpSpec::new(format!("{prefix}.v1"), stage1_in, &cfg.value_widths),
            attn2: MlpSpec::new(format!("{prefix}.a2"), stage2_in, &cfg.attn_widths),
            value2: MlpSpec::new(format!("{prefix}.v2"), stage2_in, &cfg.value_widths),
        }
    }

    fn register(&self, store: &mut ParamStore, seed: u64) -> Result<(), OdometryError> {
        for spec in [&self.attn1, &self.value1, &self.attn2, &self.value2] {
            spec.register(store, seed)?;
        }
        Ok(())
    }

    fn bind<'a>(&self, params: &BoundParams, arena: &'a mut Vec<BoundMlp>) -> Result<usize, OdometryError> {
        let base = arena.len();
        arena.push(self.attn1.bind(params)?);
        arena.push(self.value1.bind(params)?);
        arena.push(self.attn2.bind(params)?);
        arena.push(self.value2.bind(params)?);
        Ok(base)
    }
}

struct HeadSpec {
    q_w: String,
    q_b: String,
    t_w: String,
    t_b: String,
    in_dim: usize,
}

impl HeadSpec {
    fn new(prefix: &str, in_dim: usize) -> Self {
        Self {
            q_w: format!("{prefix}.q.w"),
            q_b: format!("{prefix}.q.b"),
            t_w: format!("{prefix}.t.w"),
            t_b: format!("{prefix}.t.b"),
            in_dim,
        }
    }

    fn register(&self, store: &mut ParamStore, seed: u64) -> Result<(), OdometryError> {
        use crate::numeric::xavier_uniform;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x7ead);
        store.insert(&self.q_w, xavier_uniform(&mut rng, self.in_dim, 4))?;
        // identity bias keeps the raw quaternion away from the
        // normalization singularity at initialization
        store.insert(&self.q_b, Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0]))?;
        store.insert(&self.t_w, xavier_uniform(&mut rng, self.in_dim, 3))?;
        store.insert(&self.t_b, Tensor::zeros(vec![3]))?;
        Ok(())
    }
}

struct RefineSpecs {
    cv: CvSpecs,
    up_e_pre: MlpSpec,
    up_e_post: MlpSpec,
    up_m_pre: MlpSpec,
    up_m_post: MlpSpec,
    embed: MlpSpec,
    mask: MlpSpec,
    head: HeadSpec,
}

/// Parameter layout derived from a [`NetworkConfig`].
pub struct Model {
    pub cfg: NetworkConfig,
    pyramid: Vec<MlpSpec>,
    embed_conv: MlpSpec,
    init_cv: CvSpecs,
    init_mask: MlpSpec,
    init_head: HeadSpec,
    refine: Vec<RefineSpecs>,
}

impl Model {
    pub fn new(cfg: NetworkConfig) -> Result<Self, OdometryError> {
        cfg.validate()?;
        let n_levels = cfg.levels.len();
        let c_e = cfg.embed_dim();
        let pyramid = (0..n_levels)
            .map(|l| {
                let in_dim = if l == 0 { 3 } else { 3 + 2 * cfg.feat_dim(l - 1) };
                MlpSpec::new(format!("pyr{l}"), in_dim, &cfg.levels[l].mlp_widths)
            })
            .collect();
        let penultimate = n_levels - 2;
        let init_cv = CvSpecs::new("init_cv", 3 + 2 * cfg.feat_dim(penultimate), &cfg.initial_cv);
        let cv_out = *cfg.initial_cv.value_widths.last().unwrap();
        let embed_conv = MlpSpec::new("emb_top", 3 + 2 * cv_out, &cfg.embed_conv.mlp_widths);
        let init_mask = MlpSpec::new(
            "init.mask",
            c_e + cfg.feat_dim(n_levels - 1),
            &cfg.mask_mlp_widths,
        );
        let init_head = HeadSpec::new("init", c_e);
        let refine = (0..n_levels - 1)
            .map(|l| {
                let up_pre_in = 3 + c_e;
                let up_pre_out = *cfg.upconv.pre_widths.last().unwrap();
                RefineSpecs {
                    cv: CvSpecs::new(&format!("ref{l}.cv"), 3 + 2 * cfg.feat_dim(l), &cfg.refine_cv),
                    up_e_pre: MlpSpec::new(format!("ref{l}.up_e.pre"), up_pre_in, &cfg.upconv.pre_widths),
                    up_e_post: MlpSpec::new(format!("ref{l}.up_e.post"), up_pre_out, &cfg.upconv.post_widths),
                    up_m_pre: MlpSpec::new(format!("ref{l}.up_m.pre"), up_pre_in, &cfg.upconv.pre_widths),
                    up_m_post: MlpSpec::new(format!("ref{l}.up_m.post"), up_pre_out, &cfg.upconv.post_widths),
                    embed: MlpSpec::new(format!("ref{l}.embed"), 2 * c_e + cfg.feat_dim(l), &cfg.embed_mlp_widths),
                    mask: MlpSpec::new(format!("ref{l}.mask"), 2 * c_e + cfg.feat_dim(l), &cfg.mask_mlp_widths),
                    head: HeadSpec::new(&format!("ref{l}"), c_e),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            pyramid,
            embed_conv,
            init_cv,
            init_mask,
            init_head,
            refine,
        })
    }

    /// Fresh parameter store, including the loss scale parameters.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore, OdometryError> {
        let mut store = ParamStore::new();
        for spec in &self.pyramid {
            spec.register(&mut store, seed)?;
        }
        self.init_cv.register(&mut store, seed)?;
        self.embed_conv.register(&mut store, seed)?;
        self.init_mask.register(&mut store, seed)?;
        self.init_head.register(&mut store, seed)?;
        for r in &self.refine {
            r.cv.register(&mut store, seed)?;
            for spec in [&r.up_e_pre, &r.up_e_post, &r.up_m_pre, &r.up_m_post, &r.embed, &r.mask] {
                spec.register(&mut store, seed)?;
            }
            r.head.register(&mut store, seed)?;
        }
        store.insert("loss.s_x", Tensor::scalar(self.cfg.s_x_init))?;
        store.insert("loss.s_q", Tensor::scalar(self.cfg.s_q_init))?;
        Ok(store)
    }
}

/// Runs the shared set-conv pyramid on one projected frame.
pub fn feature_pyramid(
    tape: &mut Tape,
    params: &BoundParams,
    model: &Model,
    cloud: &ProjectedCloud,
    seed: u64,
    frame_tag: u64,
) -> Result<Vec<PyramidLevel>, OdometryError> {
    let mut levels: Vec<PyramidLevel> = Vec::with_capacity(model.cfg.levels.len());
    for (l, level_cfg) in model.cfg.levels.iter().enumerate() {
        let mlp = model.pyramid[l].bind(params)?;
        let (source_cloud, source_points, feats) = if l == 0 {
            (cloud, CloudPoints::index(cloud), None)
        } else {
            let prev = levels.last().unwrap();
            (
                &prev.sampled.cloud,
                prev.points.clone(),
                Some(prev.feats),
            )
        };
        let out = set_conv(
            tape,
            source_cloud,
            &source_points,
            feats,
            level_cfg,
            &mlp,
            seed,
            frame_tag * 64 + l as u64,
        )?;
        if out.sampled.centers.is_empty() {
            return Err(OdometryError::EmptyLevel { level: l });
        }
        let points = CloudPoints::index(&out.sampled.cloud);
        levels.push(PyramidLevel {
            sampled: out.sampled,
            points,
            feats: out.feats,
        });
    }
    Ok(levels)
}

/// Embedding mask and pose heads: per-channel softmax over the point axis,
/// masked sum-pool, then linear quaternion/translation heads (the quaternion
/// normalized, with the identity fallback for a degenerate head output).
fn mask_and_pose(
    tape: &mut Tape,
    embeddings: Var,
    mask_input: Var,
    mask_mlp: &BoundMlp,
    params: &BoundParams,
    head: &HeadSpec,
) -> Result<(Var, Var, Var), OdometryError> {
    let logits = mask_mlp.apply(tape, mask_input)?;
    let mask = tape.softmax_axis(logits, 0)?;
    let weighted = tape.mul(embeddings, mask)?;
    let pooled = tape.sum_axis0(weighted)?;
    let q_raw = tape.linear(pooled, params.var(&head.q_w)?, params.var(&head.q_b)?)?;
    let q = tape.quat_normalize(q_raw)?;
    let t = tape.linear(pooled, params.var(&head.t_w)?, params.var(&head.t_b)?)?;
    Ok((mask, q, t))
}

/// Initial mask and pose from embeddings and local features (Eqs of the
/// coarsest stage): `M = softmax(MLP(E (+) F))`, pooled `sum_i e_i * m_i`,
/// then the FC heads.
pub fn initial_mask_and_pose(
    tape: &mut Tape,
    params: &BoundParams,
    model: &Model,
    embeddings: Var,
    feats: Var,
) -> Result<(Var, Var, Var), OdometryError> {
    if tape.value(embeddings).shape()[0] == 0 {
        return Err(OdometryError::EmptyLevel {
            level: model.cfg.levels.len() - 1,
        });
    }
    let mask_mlp = model.init_mask.bind(params)?;
    let cat = tape.concat_last(&[embeddings, feats])?;
    mask_and_pose(tape, embeddings, cat, &mask_mlp, params, &model.init_head)
}

/// A level-l cloud warped by the coarser pose and re-projected on the level
/// grid. All points stay queryable (out-of-view points keep their original
/// cell as the window anchor); the fresh grid resolves collisions by
/// minimum range.
pub struct WarpedLevel {
    pub xyz: Var,
    pub cells: Vec<(usize, usize)>,
    pub cell_to_query: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub out_of_fov: usize,
    pub collisions: usize,
}

/// Applies `(q, t)` to every level point (differentiably) and bins the warped
/// coordinates with the level's projection config.
pub fn pose_warp_level(
    tape: &mut Tape,
    points: &CloudPoints,
    level_cfg: &ProjectionConfig,
    q: Var,
    t: Var,
) -> Result<WarpedLevel, OdometryError> {
    let xyz = tape.constant(points.xyz_tensor())?;
    let rotated = tape.rotate_vecs(q, xyz)?;
    let warped = tape.add_row(rotated, t)?;

    let (h, w) = (level_cfg.height, level_cfg.width);
    let vals = tape.value(warped).data().to_vec();
    let n = points.len();
    let mut cells = Vec::with_capacity(n);
    let mut cell_to_query = vec![NO_POINT; h * w];
    let mut best_range = vec![f64::INFINITY; h * w];
    let mut out_of_fov = 0;
    let mut collisions = 0;
    for i in 0..n {
        let p = [vals[3 * i], vals[3 * i + 1], vals[3 * i + 2]];
        let (cell, in_view) = match level_cfg.cell(&p) {
            Some(c) => (c, true),
            None => {
                out_of_fov += 1;
                (points.cells[i], false)
            }
        };
        cells.push(cell);
        if in_view {
            let idx = cell.0 * w + cell.1;
            let range = crate::geometry::norm3(&p);
            if cell_to_query[idx] == NO_POINT {
                cell_to_query[idx] = i as u32;
                best_range[idx] = range;
            } else {
                collisions += 1;
                if range < best_range[idx] {
                    cell_to_query[idx] = i as u32;
                    best_range[idx] = range;
                }
            }
        }
    }
    Ok(WarpedLevel {
        xyz: warped,
        cells,
        cell_to_query,
        height: h,
        width: w,
        out_of_fov,
        collisions,
    })
}

struct RefineInput<'a> {
    level: usize,
    coarse_q: Var,
    coarse_t: Var,
    coarse_embeddings: Var,
    coarse_mask: Var,
    pyr1: &'a [PyramidLevel],
    pyr2: &'a [PyramidLevel],
}

/// One pose warp-refinement step at level `l`: upconv the coarser embeddings
/// and mask, warp the level cloud by the coarser pose, re-correlate against
/// frame 2, fuse, and regress a residual pose composed onto the coarser one.
fn warp_refine(
    tape: &mut Tape,
    params: &BoundParams,
    model: &Model,
    input: RefineInput<'_>,
    seed: u64,
    stats: &mut ForwardStats,
) -> Result<LevelOutput, OdometryError> {
    let l = input.level;
    let spec = &model.refine[l];
    let dense = &input.pyr1[l];
    let sparse = &input.pyr1[l + 1];
    let tag = 0x600 + l as u64;

    let up_cfg = UpconvConfig {
        radius: model.cfg.levels[l + 1].radius,
        ..model.cfg.upconv.clone()
    };
    let stride = model.cfg.levels[l + 1].stride;
    let (ce, empty_e) = set_upconv(
        tape,
        &dense.points,
        &sparse.points,
        input.coarse_embeddings,
        stride,
        &up_cfg,
        &spec.up_e_pre.bind(params)?,
        &spec.up_e_post.bind(params)?,
        seed,
        tag,
    )?;
    // the mask upconv reuses the same grouping key so both propagate
    // through identical neighborhoods
    let (cm, _) = set_upconv(
        tape,
        &dense.points,
        &sparse.points,
        input.coarse_mask,
        stride,
        &up_cfg,
        &spec.up_m_pre.bind(params)?,
        &spec.up_m_post.bind(params)?,
        seed,
        tag,
    )?;
    stats.upconv_empty += empty_e;

    let warped = pose_warp_level(
        tape,
        &dense.points,
        dense.sampled.cloud.config(),
        input.coarse_q,
        input.coarse_t,
    )?;
    stats.warp_out_of_fov += warped.out_of_fov;
    stats.warp_collisions += warped.collisions;

    let cv_cfg = CostVolumeConfig {
        radius: model.cfg.levels[l].radius,
        ..model.cfg.refine_cv.clone()
    };
    let mut arena = Vec::new();
    let base = spec.cv.bind(params, &mut arena)?;
    let weights = CostVolumeWeights {
        attn1: &arena[base],
        value1: &arena[base + 1],
        attn2: &arena[base + 2],
        value2: &arena[base + 3],
    };
    let query = CostVolumeQuery {
        xyz: warped.xyz,
        feats: dense.feats,
        cells: &warped.cells,
        grid_height: warped.height,
        grid_width: warped.width,
        grid_cell_to_query: &warped.cell_to_query,
    };
    let cv = attentive_cost_volume(
        tape,
        &query,
        &input.pyr2[l].points,
        input.pyr2[l].feats,
        &cv_cfg,
        &weights,
        seed,
        tag ^ 0xc0,
    )?;
    stats.cv_row_fallbacks += cv.stats.row_fallbacks;
    stats.cv_grid_fallbacks += cv.stats.grid_fallbacks;

    let e_cat = tape.concat_last(&[ce, cv.embeddings, dense.feats])?;
    let embeddings = spec.embed.bind(params)?.apply(tape, e_cat)?;
    let m_cat = tape.concat_last(&[embeddings, cm, dense.feats])?;
    let (mask, dq, dt) = mask_and_pose(
        tape,
        embeddings,
        m_cat,
        &spec.mask.bind(params)?,
        params,
        &spec.head,
    )?;

    // pose composition: q_l = dq q_{l+1}; t_l = dq t_{l+1} dq^-1 + dt
    let q = tape.hamilton(dq, input.coarse_q)?;
    let q = tape.quat_normalize(q)?;
    let t_row = tape.reshape(input.coarse_t, vec![1, 3])?;
    let t_rot = tape.rotate_vecs(dq, t_row)?;
    let t_rot = tape.reshape(t_rot, vec![3])?;
    let t = tape.add(t_rot, dt)?;
    Ok(LevelOutput {
        q,
        t,
        mask,
        embeddings,
    })
}

/// Public wrapper over one warp-refinement step, used by tests that drive a
/// single level in isolation.
#[allow(clippy::too_many_arguments)]
pub fn warp_refine_level(
    tape: &mut Tape,
    params: &BoundParams,
    model: &Model,
    level: usize,
    coarse: &LevelOutput,
    pyr1: &[PyramidLevel],
    pyr2: &[PyramidLevel],
    seed: u64,
) -> Result<LevelOutput, OdometryError> {
    let mut stats = ForwardStats::default();
    warp_refine(
        tape,
        params,
        model,
        RefineInput {
            level,
            coarse_q: coarse.q,
            coarse_t: coarse.t,
            coarse_embeddings: coarse.embeddings,
            coarse_mask: coarse.mask,
            pyr1,
            pyr2,
        },
        seed,
        &mut stats,
    )
}

/// Full forward pass over a projected frame pair. Returns per-level poses
/// and masks, finest level first.
pub fn forward(
    tape: &mut Tape,
    params: &BoundParams,
    model: &Model,
    pc1: &ProjectedCloud,
    pc2: &ProjectedCloud,
    seed: u64,
) -> Result<ForwardOutput, OdometryError> {
    let mut stats = ForwardStats::default();
    let pyr1 = feature_pyramid(tape, params, model, pc1, seed, 1)?;
    let pyr2 = feature_pyramid(tape, params, model, pc2, seed, 2)?;
    let n_levels = model.cfg.levels.len();
    let lp = n_levels - 2;

    // first correlation at the penultimate level
    let mut arena = Vec::new();
    let base = model.init_cv.bind(params, &mut arena)?;
    let weights = CostVolumeWeights {
        attn1: &arena[base],
        value1: &arena[base + 1],
        attn2: &arena[base + 2],
        value2: &arena[base + 3],
    };
    let q_xyz = tape.constant(pyr1[lp].points.xyz_tensor())?;
    let query = CostVolumeQuery {
        xyz: q_xyz,
        feats: pyr1[lp].feats,
        cells: &pyr1[lp].points.cells,
        grid_height: pyr1[lp].points.height,
        grid_width: pyr1[lp].points.width,
        grid_cell_to_query: &pyr1[lp].points.cell_to_point,
    };
    let mut cv_cfg = model.cfg.initial_cv.clone();
    cv_cfg.radius = model.cfg.levels[lp].radius;
    let cv = attentive_cost_volume(
        tape,
        &query,
        &pyr2[lp].points,
        pyr2[lp].feats,
        &cv_cfg,
        &weights,
        seed,
        0x1c0,
    )?;
    stats.cv_row_fallbacks += cv.stats.row_fallbacks;
    stats.cv_grid_fallbacks += cv.stats.grid_fallbacks;

    // embeddings down to the coarsest grid, then the first mask and pose
    let emb_mlp = model.embed_conv.bind(params)?;
    let top_conv = set_conv(
        tape,
        &pyr1[lp].sampled.cloud,
        &pyr1[lp].points,
        Some(cv.embeddings),
        &model.cfg.embed_conv,
        &emb_mlp,
        seed,
        0x1e0,
    )?;
    debug_assert_eq!(top_conv.sampled.centers.len(), pyr1[n_levels - 1].points.len());
    let (mask, q, t) = initial_mask_and_pose(
        tape,
        params,
        model,
        top_conv.feats,
        pyr1[n_levels - 1].feats,
    )?;

    let mut outputs: Vec<LevelOutput> = Vec::with_capacity(n_levels);
    outputs.push(LevelOutput {
        q,
        t,
        mask,
        embeddings: top_conv.feats,
    });
    for l in (0..n_levels - 1).rev() {
        let coarse = outputs.last().unwrap();
        let refined = warp_refine(
            tape,
            params,
            model,
            RefineInput {
                level: l,
                coarse_q: coarse.q,
                coarse_t: coarse.t,
                coarse_embeddings: coarse.embeddings,
                coarse_mask: coarse.mask,
                pyr1: &pyr1,
                pyr2: &pyr2,
            },
            seed,
            &mut stats,
        )?;
        outputs.push(refined);
    }
    outputs.reverse();
    Ok(ForwardOutput {
        levels: outputs,
        pyramid1: pyr1,
        stats,
    })
}
