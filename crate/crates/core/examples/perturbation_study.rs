//! Held-out mIoU of the `paper` preset under noisy boxes.
//!
//! cargo run --release --example perturbation_study -- [seed]

use boxseg::bench::{generate_synthetic_scene, PerturbMode, PerturbSpec, SynthSpec};
use boxseg::pipeline::{run_pipeline, PipelineConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let train = generate_synthetic_scene(&SynthSpec { seed, ..Default::default() }).unwrap().scene;
    let held = generate_synthetic_scene(&SynthSpec {
        seed: seed + 1000,
        ..Default::default()
    })
    .unwrap()
    .scene;
    let studies = [
        ("exact", None),
        ("translate 0.1", Some((PerturbMode::Translate, 0.1))),
        ("translate 0.2", Some((PerturbMode::Translate, 0.2))),
        ("scale 0.1", Some((PerturbMode::Scale, 0.1))),
        ("scale 0.2", Some((PerturbMode::Scale, 0.2))),
        ("discard 0.2", Some((PerturbMode::Discard, 0.2))),
    ];
    for (name, p) in studies {
        let mut cfg = PipelineConfig::paper();
        cfg.seed = seed;
        cfg.perturb = p.map(|(mode, mag)| PerturbSpec::from_magnitude(mode, mag, seed));
        let r = run_pipeline(&cfg, &train, Some(&held)).unwrap().report.unwrap();
        println!("{name:>14}: mIoU {:.4}", r.miou);
    }
}
