//! Attention self-training on box priors plus refined background labels,
//! with the epoch loss and the final label quality per point category.
//!
//! cargo run --release --example ast_training -- [seed]

use boxseg::ast::train_segmentation;
use boxseg::bench::{generate_synthetic_scene, label_quality, SynthSpec};
use boxseg::features::compute_features;
use boxseg::partition_points;
use boxseg::pipeline::{background_labels, foreground_stage, train_classifier_stage, PipelineConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let scene = generate_synthetic_scene(&SynthSpec {
        seed,
        box_dilation: 0.15,
        min_gap: 0.02,
        ..Default::default()
    })
    .unwrap()
    .scene;
    let mut cfg = PipelineConfig::paper();
    cfg.seed = seed;
    let train = cfg.seeded_train();
    let partition = partition_points(&scene);
    let features = compute_features(&scene, &train.features);

    let mut initial = foreground_stage(&cfg, &scene, &partition).unwrap();
    let classifier = train_classifier_stage(&cfg, &scene, &features).unwrap();
    initial.merge_from(&background_labels(&classifier, &scene, &features, &partition, &train).unwrap());

    let out = train_segmentation(&scene, &features, &partition, &initial, &train).unwrap();
    for (e, l) in out.epoch_loss.iter().enumerate().step_by(5) {
        println!("epoch {e:>3}: loss {l:.4}");
    }
    let q = label_quality(&out.labels, scene.ground_truth.as_ref().unwrap(), Some(&partition)).unwrap();
    for (cat, s) in &q.per_category {
        println!("{cat:>22}: {}/{} labeled, accuracy {:.3}", s.labeled, s.total, s.precision);
    }
}
