//! Command line for the projection-aware LiDAR odometry pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use plo_core::harness::{
    self, bench_grouping, error_bars_svg, infer_sequence, kitti_metrics, timings_csv,
    trajectory_svg, FileConfig, GroupingBenchConfig, MetricsReport,
};
use plo_core::numeric::{read_checkpoint, write_checkpoint};
use plo_core::odometry::{Model, NetworkConfig};
use plo_core::projection::{project, write_grid_dump};

/// Environment variable selecting the worker thread count.
const ENV_THREADS: &str = "PLO_THREADS";
/// Environment variable selecting the RNG seed.
const ENV_SEED: &str = "PLO_SEED";

#[derive(Parser)]
#[command(name = "plo", version, about = "Projection-aware LiDAR odometry")]
struct Cli {
    /// RNG seed (overrides PLO_SEED and the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread count (overrides PLO_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project a scan onto the cylindrical grid and dump it as binary.
    Project(ProjectArgs),
    /// Train a model from a config file.
    Train(TrainArgs),
    /// Run inference over a scan directory, writing a KITTI pose file.
    Infer(InferArgs),
    /// Evaluate a predicted pose file against ground truth.
    Eval(EvalArgs),
    /// Time the grouping strategies on synthetic clouds.
    Bench(BenchArgs),
    /// Run the built-in oracle checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct ProjectArgs {
    /// Input Velodyne .bin scan.
    #[arg(long)]
    scan: PathBuf,
    /// Output grid dump path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Square crop half-side in meters.
    #[arg(long)]
    half_side: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config file (defaults apply for missing keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and logs.
    #[arg(long, default_value = "train-out")]
    out: PathBuf,
    /// Override the configured step count.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of .bin scans (sorted lexicographically).
    #[arg(long)]
    scans: PathBuf,
    /// Output KITTI-format pose file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Limit the number of scans.
    #[arg(long)]
    max_scans: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted KITTI-format pose file.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth KITTI-format pose file.
    #[arg(long)]
    gt: PathBuf,
    /// Output directory for the JSON/CSV report and SVG plots.
    #[arg(long, default_value = "eval-out")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated cloud sizes.
    #[arg(long, default_value = "100000")]
    sizes: String,
    #[arg(long, default_value_t = 21)]
    reps: usize,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Print the full default config as TOML and exit.
    #[arg(long)]
    show_config: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let threads = cli
        .threads
        .or_else(|| std::env::var(ENV_THREADS).ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        plo_core::exec::configure_threads(n)?;
    }
    let env_seed = std::env::var(ENV_SEED).ok().and_then(|v| v.parse().ok());

    match cli.command {
        Command::Project(args) => {
            let cfg = load_config(args.config.as_deref())?;
            let half_side = args.half_side.unwrap_or(cfg.half_side);
            let points = harness::load_scan(&args.scan, half_side)?;
            let (cloud, stats) = project(&points, &cfg.network.projection);
            let file = std::fs::File::create(&args.out)?;
            write_grid_dump(&cloud, std::io::BufWriter::new(file))?;
            println!(
                "projected {} points: {} kept, {} out of fov, {} at origin, {} collisions -> {}",
                stats.input,
                stats.kept,
                stats.out_of_fov,
                stats.skipped_origin,
                stats.collisions,
                args.out.display()
            );
        }
        Command::Train(args) => {
            let mut cfg = load_config(args.config.as_deref())?;
            if let Some(seed) = cli.seed.or(env_seed) {
                cfg.seed = seed;
            }
            let model = Model::new(cfg.network.clone())?;
            let mut train_cfg = cfg.train_config(args.out);
            if let Some(steps) = args.steps {
                train_cfg.steps = steps;
            }
            let dataset = cfg.dataset()?;
            let report = harness::train(&model, &train_cfg, &dataset)?;
            println!(
                "trained {} steps: loss {:.4} -> {:.4}",
                report.steps_run, report.initial_loss, report.final_loss
            );
            println!("checkpoint: {}", report.checkpoint.display());
            println!("log: {}", report.log_csv.display());
        }
        Command::Infer(args) => {
            let cfg = load_config(args.config.as_deref())?;
            let params = read_checkpoint(std::io::BufReader::new(std::fs::File::open(
                &args.checkpoint,
            )?))?;
            let model = Model::new(cfg.network.clone())?;
            let mut scans: Vec<PathBuf> = std::fs::read_dir(&args.scans)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.extension().is_some_and(|e| e == "bin"))
                .collect();
            scans.sort();
            if let Some(max) = args.max_scans {
                scans.truncate(max);
            }
            let seed = cli.seed.or(env_seed).unwrap_or(cfg.seed);
            let (traj, timings) = infer_sequence(&model, &params, &scans, cfg.half_side, seed)?;
            harness::write_poses(&traj, &args.out)?;
            let timing_path = args.out.with_extension("timings.csv");
            std::fs::write(&timing_path, timings_csv(&timings))?;
            let mean_prep: f64 =
                timings.iter().map(|t| t.data_prep_s).sum::<f64>() / timings.len() as f64;
            let mean_inf: f64 =
                timings.iter().map(|t| t.inference_s).sum::<f64>() / timings.len() as f64;
            println!(
                "{} scans -> {} poses ({})",
                scans.len(),
                traj.len(),
                args.out.display()
            );
            println!(
                "mean per pair: data prep {:.1} ms, inference {:.1} ms (timings: {})",
                mean_prep * 1e3,
                mean_inf * 1e3,
                timing_path.display()
            );
        }
        Command::Eval(args) => {
            let pred = harness::load_poses(&args.pred)?;
            let gt = harness::load_poses(&args.gt)?;
            let km = kitti_metrics(&pred, &gt)?;
            let (ate, rpe) = harness::ate_rpe(&pred, &gt)?;
            let report = MetricsReport {
                t_rel: km.t_rel,
                r_rel: km.r_rel,
                ate,
                rpe,
                per_length: km.per_length.clone(),
            };
            std::fs::create_dir_all(&args.out)?;
            std::fs::write(
                args.out.join("metrics.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            let mut csv = String::from("length_m,t_rel_pct,r_rel_deg_per_100m,count\n");
            for (len, t, r, n) in &km.per_length {
                csv.push_str(&format!("{len},{t},{r},{n}\n"));
            }
            std::fs::write(args.out.join("per_length.csv"), csv)?;
            std::fs::write(
                args.out.join("trajectory.svg"),
                trajectory_svg(&[("prediction", &pred), ("ground truth", &gt)]),
            )?;
            std::fs::write(
                args.out.join("error_bars.svg"),
                error_bars_svg(&km.per_length),
            )?;
            println!(
                "t_rel {:.4}% r_rel {:.4} deg/100m ate {:.4} m rpe {:.4} m -> {}",
                report.t_rel,
                report.r_rel,
                report.ate,
                report.rpe,
                args.out.display()
            );
        }
        Command::Bench(args) => {
            let sizes: Result<Vec<usize>, _> =
                args.sizes.split(',').map(|s| s.trim().parse()).collect();
            let cfg = GroupingBenchConfig {
                sizes: sizes?,
                reps: args.reps,
                seed: cli.seed.or(env_seed).unwrap_or(1),
                ..Default::default()
            };
            let report = bench_grouping(&cfg)?;
            print!("{}", report.summary());
            if let Some(out) = args.out {
                std::fs::write(&out, report.to_csv())?;
                println!("csv: {}", out.display());
            }
        }
        Command::Selftest(args) => {
            if args.show_config {
                print!("{}", FileConfig::default().to_toml());
                return Ok(());
            }
            selftest()?;
        }
    }
    Ok(())
}

fn load_config(path: Option<&std::path::Path>) -> Result<FileConfig, Box<dyn std::error::Error>> {
    Ok(match path {
        Some(p) => FileConfig::from_path(p)?,
        None => FileConfig::default(),
    })
}

/// Quick oracle sweep: geometry, projection, gradients, metrics, and a tiny
/// two-level forward pass. Prints one line per check.
fn selftest() -> Result<(), Box<dyn std::error::Error>> {
    use plo_core::geometry as geo;
    use plo_core::numeric::{grad_check, Tape, Tensor};
    use rand::{Rng, SeedableRng};

    let mut failures = 0;
    let mut check = |name: &str, ok: bool| {
        println!("[{}] {name}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut ok = true;
    for _ in 0..200 {
        let q = geo::quat_normalize(&geo::Quaternion::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ))?;
        let p = [
            rng.gen_range(-30.0..30.0),
            rng.gen_range(-30.0..30.0),
            rng.gen_range(-5.0..5.0),
        ];
        let r = geo::quat_rotate(&q, &p)?;
        ok &= (geo::norm3(&r) - geo::norm3(&p)).abs() < 1e-9;
    }
    check("quaternion rotation preserves norms (200 random draws)", ok);

    let cfg = plo_core::projection::ProjectionConfig::velodyne_64();
    let pts: Vec<[f64; 3]> = (0..5000)
        .map(|_| {
            let r = rng.gen_range(2.0..50.0);
            let az = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let el = rng.gen_range(cfg.phi_min + 1e-3..cfg.phi_max - 1e-3);
            [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()]
        })
        .collect();
    let (cloud, _) = project(&pts, &cfg);
    let ok = cloud
        .iter_valid()
        .all(|(row, col, xyz)| cfg.cell(xyz) == Some((row, col)));
    check("projection round trip on 5k random points", ok);

    let x = Tensor::new(vec![4, 3], (0..12).map(|i| 0.3 + 0.05 * i as f64).collect())?;
    let w = Tensor::new(vec![3, 2], (0..6).map(|i| 0.1 * (i as f64 + 1.0)).collect())?;
    let b = Tensor::new(vec![2], vec![0.05, -0.1])?;
    let err = grad_check(
        |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            let r = g.relu(y)?;
            let s = g.softmax_axis(r, 1)?;
            let m = g.mul(s, s)?;
            g.sum_all(m)
        },
        &[x, w, b],
        1e-4,
    )?;
    check(
        &format!("linear+relu+softmax gradient check (rel err {err:.2e})"),
        err < 1e-3,
    );

    let line: Vec<geo::PoseMatrix> = (0..400)
        .map(|i| {
            geo::PoseMatrix::new([
                [1.0, 0.0, 0.0, i as f64],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ])
            .unwrap()
        })
        .collect();
    let gt = harness::Trajectory(line);
    let scaled = harness::Trajectory(
        gt.0.iter()
            .map(|p| {
                let mut rows = *p.rows();
                rows[0][3] *= 1.01;
                geo::PoseMatrix::new(rows).unwrap()
            })
            .collect(),
    );
    let m = kitti_metrics(&scaled, &gt)?;
    check(
        &format!("1% scale drift reads t_rel = {:.6}%", m.t_rel),
        (m.t_rel - 1.0).abs() < 1e-6,
    );

    let net = NetworkConfig::toy_two_level();
    let model = Model::new(net.clone())?;
    let params = model.init_params(3)?;
    let scene: Vec<[f64; 3]> = (0..600)
        .map(|_| {
            let r = rng.gen_range(3.0..30.0);
            let az = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let el = rng.gen_range(net.projection.phi_min + 1e-3..net.projection.phi_max - 1e-3);
            [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()]
        })
        .collect();
    let (pc1, _) = project(&scene, &net.projection);
    let (pc2, _) = project(&scene, &net.projection);
    let mut tape = Tape::new();
    let bound = plo_core::numeric::BoundParams::bind(&mut tape, &params)?;
    let out = plo_core::odometry::forward(&mut tape, &bound, &model, &pc1, &pc2, 5)?;
    let qn: f64 = tape
        .value(out.levels[0].q)
        .data()
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    check(
        &format!("two-level forward pass yields unit quaternion (|q| = {qn:.9})"),
        (qn - 1.0).abs() < 1e-6,
    );

    let mut bytes = Vec::new();
    write_checkpoint(&params, &mut bytes)?;
    let back = read_checkpoint(bytes.as_slice())?;
    let mut bytes2 = Vec::new();
    write_checkpoint(&back, &mut bytes2)?;
    check("checkpoint file round trip is bit-exact", bytes == bytes2);

    if failures > 0 {
        Err(format!("{failures} selftest checks failed").into())
    } else {
        println!("all selftest checks passed");
        Ok(())
    }
}
