//! Grouping benchmark: window-restricted grouping + filtering against
//! filtering without the kernel prior and against brute-force global KNN.
//! Timing runs single-threaded so configurations do not interfere.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::HarnessError;
use crate::exec;
use crate::geometry::Vec3;
use crate::pointops::{
    distance_filter_select, selection_rng, stride_sample, window_candidates, Candidate,
    CloudPoints, SelectionMode,
};
use crate::projection::{project, ProjectionConfig};

#[derive(Debug, Clone)]
pub struct GroupingBenchConfig {
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    pub projection: ProjectionConfig,
    pub stride: (usize, usize),
    pub kernel: (usize, usize),
    pub neighbors: usize,
    pub radius: f64,
}

impl Default for GroupingBenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![100_000],
            reps: 21,
            seed: 1,
            projection: ProjectionConfig::velodyne_64(),
            stride: (4, 8),
            kernel: (9, 15),
            neighbors: 16,
            radius: 1.5,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupingBenchRow {
    pub size: usize,
    pub centers: usize,
    /// Median seconds: window grouping + filtering, random selection.
    pub window_random_s: f64,
    /// Median seconds: window grouping + filtering, KNN selection.
    pub window_knn_s: f64,
    /// Median seconds: radius filtering over all points (no kernel prior).
    pub no_prior_s: f64,
    /// Median seconds: brute-force global KNN.
    pub global_knn_s: f64,
    /// FNV digest of the window/random neighbor sets (determinism probe).
    pub selection_digest: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupingBenchReport {
    pub rows: Vec<GroupingBenchRow>,
}

impl GroupingBenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "size,centers,window_random_s,window_knn_s,no_prior_s,global_knn_s\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.size, r.centers, r.window_random_s, r.window_knn_s, r.no_prior_s, r.global_knn_s
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&format!(
                "{} points, {} centers: window+filter {:.3} ms (random) / {:.3} ms (knn), \
                 no-prior filter {:.3} ms ({:.1}x), global knn {:.3} ms ({:.1}x)\n",
                r.size,
                r.centers,
                r.window_random_s * 1e3,
                r.window_knn_s * 1e3,
                r.no_prior_s * 1e3,
                r.no_prior_s / r.window_random_s.max(1e-12),
                r.global_knn_s * 1e3,
                r.global_knn_s / r.window_random_s.max(1e-12),
            ));
        }
        out
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn synthetic_points(rng: &mut ChaCha8Rng, n: usize, cfg: &ProjectionConfig) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            let r = rng.gen_range(2.5f64..60.0);
            let az = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let el = rng.gen_range(cfg.phi_min + 1e-4..cfg.phi_max - 1e-4);
            [
                r * el.cos() * az.cos(),
                r * el.cos() * az.sin(),
                r * el.sin(),
            ]
        })
        .collect()
}

fn fnv_digest(sets: &[Vec<u32>]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for set in sets {
        for &m in set {
            h ^= m as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Brute-force K nearest over all points (partial selection, then an exact
/// sort of the head) — the no-prior baseline the window path is compared to.
fn brute_knn(center: &Vec3, points: &[Vec3], k: usize) -> Vec<u32> {
    let mut scored: Vec<(f64, u32)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d = (p[0] - center[0]).powi(2)
                + (p[1] - center[1]).powi(2)
                + (p[2] - center[2]).powi(2);
            (d, i as u32)
        })
        .collect();
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(k);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Times the three grouping strategies on synthetic clouds of each size.
/// Sizes of zero are skipped (they produce no report rows).
pub fn bench_grouping(cfg: &GroupingBenchConfig) -> Result<GroupingBenchReport, HarnessError> {
    if cfg.reps == 0 {
        return Err(HarnessError::BadConfig {
            reason: "reps must be >= 1".into(),
        });
    }
    let mut rows = Vec::new();
    for &size in &cfg.sizes {
        if size == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let points = synthetic_points(&mut rng, size, &cfg.projection);
        let (cloud, _) = project(&points, &cfg.projection);
        let cloud_points = CloudPoints::index(&cloud);
        let sampled = stride_sample(&cloud, cfg.stride.0, cfg.stride.1);
        let centers = sampled.centers.len();

        let all_candidates: Vec<Candidate> = (0..cloud_points.len())
            .map(|p| Candidate {
                point: p as u32,
                xyz: cloud_points.xyz[p],
                cell_rm: (cloud_points.cells[p].0 * cloud_points.width + cloud_points.cells[p].1)
                    as u32,
            })
            .collect();

        let run_window = |mode: SelectionMode, collect: bool| -> (f64, Vec<Vec<u32>>) {
            let mut sets = Vec::new();
            let t0 = Instant::now();
            for (ci, ctr) in sampled.centers.iter().enumerate() {
                let cands = window_candidates(&cloud_points, ctr.src, cfg.kernel);
                let mut sel = selection_rng(cfg.seed, 1, ci as u64);
                if let Ok(set) = distance_filter_select(
                    &ctr.xyz,
                    &cands,
                    cfg.radius,
                    cfg.neighbors,
                    mode,
                    &mut sel,
                ) {
                    if collect {
                        sets.push(set.members);
                    } else {
                        std::hint::black_box(&set.members);
                    }
                }
            }
            (t0.elapsed().as_secs_f64(), sets)
        };
        let run_no_prior = || -> f64 {
            let t0 = Instant::now();
            for (ci, ctr) in sampled.centers.iter().enumerate() {
                let mut sel = selection_rng(cfg.seed, 2, ci as u64);
                if let Ok(set) = distance_filter_select(
                    &ctr.xyz,
                    &all_candidates,
                    cfg.radius,
                    cfg.neighbors,
                    SelectionMode::Random,
                    &mut sel,
                ) {
                    std::hint::black_box(&set.members);
                }
            }
            t0.elapsed().as_secs_f64()
        };
        let run_global_knn = || -> f64 {
            let t0 = Instant::now();
            for ctr in &sampled.centers {
                std::hint::black_box(brute_knn(&ctr.xyz, &cloud_points.xyz, cfg.neighbors));
            }
            t0.elapsed().as_secs_f64()
        };

        let (mut tw_r, mut tw_k, mut tn, mut tg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut digest = 0;
        exec::with_sequential(|| {
            for rep in 0..cfg.reps {
                let (t, sets) = run_window(SelectionMode::Random, rep == 0);
                tw_r.push(t);
                if rep == 0 {
                    digest = fnv_digest(&sets);
                }
                tw_k.push(run_window(SelectionMode::Knn, false).0);
                tn.push(run_no_prior());
                tg.push(run_global_knn());
            }
        });
        rows.push(GroupingBenchRow {
            size,
            centers,
            window_random_s: median(tw_r),
            window_knn_s: median(tw_k),
            no_prior_s: median(tn),
            global_knn_s: median(tg),
            selection_digest: digest,
        });
    }
    Ok(GroupingBenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_size_produces_no_rows() {
        let cfg = GroupingBenchConfig {
            sizes: vec![0],
            reps: 1,
            ..Default::default()
        };
        let report = bench_grouping(&cfg).unwrap();
        assert!(report.rows.is_empty());
    }

    #[test]
    fn identical_seeds_give_identical_selections() {
        let cfg = GroupingBenchConfig {
            sizes: vec![5000],
            reps: 1,
            ..Default::default()
        };
        let a = bench_grouping(&cfg).unwrap();
        let b = bench_grouping(&cfg).unwrap();
        assert_eq!(a.rows[0].selection_digest, b.rows[0].selection_digest);
        assert_ne!(a.rows[0].selection_digest, 0);
    }

    #[test]
    fn csv_and_summary_render() {
        let cfg = GroupingBenchConfig {
            sizes: vec![3000],
            reps: 1,
            ..Default::default()
        };
        let report = bench_grouping(&cfg).unwrap();
        assert!(report.to_csv().lines().count() == 2);
        assert!(report.summary().contains("points"));
    }
}
