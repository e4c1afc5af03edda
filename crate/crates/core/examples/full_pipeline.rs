//! Pipeline with the `paper` preset on a synthetic scene, evaluated on a held-out one.
//!
//! cargo run --release --example full_pipeline -- [seed]

use boxseg::bench::{generate_synthetic_scene, SynthSpec};
use boxseg::pipeline::{run_pipeline, PipelineConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let train = generate_synthetic_scene(&SynthSpec { seed, ..Default::default() }).unwrap();
    let held = generate_synthetic_scene(&SynthSpec {
        seed: seed + 1000,
        ..Default::default()
    })
    .unwrap();
    println!("training scene: {} points, {} boxes", train.scene.len(), train.scene.boxes.len());

    let mut cfg = PipelineConfig::paper();
    cfg.seed = seed;
    let out = run_pipeline(&cfg, &train.scene, Some(&held.scene)).unwrap();

    for t in &out.timings {
        println!("{:>12}: {:.2}s", t.stage, t.seconds);
    }
    let q = out.in_box_quality.unwrap();
    println!("in-box label accuracy: {:.4}", q.overall.accuracy);
    let r = out.report.unwrap();
    println!("held-out mIoU: {:.4}", r.miou);
    for (c, v) in r.per_class_iou.iter().enumerate() {
        println!("  class {c}: {}", v.map_or("-".to_string(), |v| format!("{v:.4}")));
    }
    let first = out.epoch_loss.first().copied().unwrap_or(0.0);
    let last = out.epoch_loss.last().copied().unwrap_or(0.0);
    println!("segmentation loss: {first:.4} -> {last:.4}");
}
