use plo_core::harness::*;
use plo_core::numeric::LrSchedule;
use plo_core::odometry::{Model, NetworkConfig};
use std::time::Instant;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(450);
    let mut wins = 0;
    let t00 = Instant::now();
    for seed in 0..10u64 {
        let model = Model::new(NetworkConfig::reduced_16x256()).unwrap();
        let cfg = SynthConfig {
            seed: 1000 + seed,
            points_per_frame: 8000,
            ray_rows: 16,
            static_boxes: 8,
            dynamic_box: true,
            dynamic_motion_scale: 5.0,
            rot_range_deg: 2.5,
            trans_range_m: 1.0,
            ..Default::default()
        };
        let dataset = Dataset::Synthetic { cfg, pairs: 8 };
        let train_cfg = TrainConfig {
            seed: seed + 1,
            steps,
            batch_size: 8,
            lr: LrSchedule { initial: 2e-3, decay: 0.7, interval: 200_000, floor: 1e-5 },
            out_dir: std::env::temp_dir().join(format!("plo-mask-probe-{seed}")),
            log_every: 0,
            ..Default::default()
        };
        let t0 = Instant::now();
        let report = train(&model, &train_cfg, &dataset).unwrap();
        let mut s_tot = 0.0; let mut d_tot = 0.0; let mut n = 0;
        for &(s, d) in &report.final_mask_split {
            if d.is_finite() && s.is_finite() { s_tot += s; d_tot += d; n += 1; }
        }
        let (s_mean, d_mean) = (s_tot / n as f64, d_tot / n as f64);
        let win = d_mean < s_mean;
        if win { wins += 1; }
        eprintln!(
            "seed {seed}: {} pairs with dynamics, static {:.3e} dynamic {:.3e} -> {} ({:.0}s)",
            n, s_mean, d_mean, if win { "OK" } else { "MISS" }, t0.elapsed().as_secs_f64()
        );
    }
    eprintln!("wins: {wins}/10 in {:.0}s total", t00.elapsed().as_secs_f64());
}
