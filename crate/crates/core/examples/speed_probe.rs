use plo_core::harness::*;
use plo_core::odometry::{Model, NetworkConfig};
use std::time::Instant;

fn main() {
    let model = Model::new(NetworkConfig::reduced_16x256()).unwrap();
    let params = model.init_params(1).unwrap();
    eprintln!("params: {} tensors, {} scalars", params.len(), params.numel());
    let cfg = SynthConfig {
        seed: 42,
        points_per_frame: 8000,
        ray_rows: 16,
        static_boxes: 8,
        rot_range_deg: 2.5,
        trans_range_m: 1.0,
        ..Default::default()
    };
    let dataset = Dataset::Synthetic { cfg, pairs: 8 };
    let train_cfg = TrainConfig {
        seed: 1,
        steps: 2000,
        batch_size: 8,
        out_dir: std::env::temp_dir().join("plo-speed-probe"),
        log_every: 25,
        stop_at: Some((0.4, 0.04)),
        lr: plo_core::numeric::LrSchedule { initial: 2e-3, decay: 0.7, interval: 200000, floor: 1e-5 },
        ..Default::default()
    };
    let t0 = Instant::now();
    let report = match train(&model, &train_cfg, &dataset) { Ok(r) => r, Err(e) => { eprintln!("TRAIN ERR: {e}"); return; } };
    let dt = t0.elapsed().as_secs_f64();
    eprintln!("total {:.1}s", dt);
    eprintln!("steps_run: {}", report.steps_run);
    eprintln!("loss first/last: {} {}", report.initial_loss, report.final_loss);
    for (i, l) in report.loss_curve.iter().enumerate() { if i % 50 == 0 { eprintln!("step {i}: loss {l:.4}"); } }
    eprintln!("final errors: {:?}", report.final_errors);
}
