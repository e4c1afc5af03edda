//! Trains the subcloud tag classifier and labels the points outside every
//! box from its class activation maps, before and after refinement.
//!
//! cargo run --release --example pcam_background -- [seed]

use boxseg::bench::{generate_synthetic_scene, label_quality, SynthSpec};
use boxseg::features::compute_features;
use boxseg::partition_points;
use boxseg::pipeline::{background_labels, train_classifier_stage, PipelineConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let scene = generate_synthetic_scene(&SynthSpec { seed, ..Default::default() }).unwrap().scene;
    let mut cfg = PipelineConfig::paper();
    cfg.seed = seed;
    let partition = partition_points(&scene);
    let features = compute_features(&scene, &cfg.train.features);
    let classifier = train_classifier_stage(&cfg, &scene, &features).unwrap();
    let gt = scene.ground_truth.as_ref().unwrap();
    for refine in [false, true] {
        let train = boxseg::net::TrainConfig {
            refine,
            ..cfg.seeded_train()
        };
        let labels = background_labels(&classifier, &scene, &features, &partition, &train).unwrap();
        let q = label_quality(&labels, gt, None).unwrap();
        println!(
            "refine {refine}: {} labels, accuracy {:.3}",
            q.overall.labeled, q.overall.precision
        );
    }
}
