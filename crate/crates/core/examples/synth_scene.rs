//! Generates a synthetic scene and writes it in the scene text format.
//!
//! cargo run --release --example synth_scene -- [seed] [out.scene]

use std::collections::BTreeMap;

use boxseg::bench::{generate_synthetic_scene, SynthSpec};
use boxseg::serialize_scene;

fn main() {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = SynthSpec {
        rooms: 2,
        seed,
        ..Default::default()
    };
    let synth = generate_synthetic_scene(&spec).unwrap();
    let scene = &synth.scene;
    println!(
        "{} points, {} boxes, {} subclouds",
        scene.len(),
        scene.boxes.len(),
        scene.subclouds.len()
    );
    let mut per_class = BTreeMap::new();
    for &c in scene.ground_truth.as_ref().unwrap() {
        *per_class.entry(c).or_insert(0usize) += 1;
    }
    println!("floor is class {}, wall is class {}", spec.floor_class(), spec.wall_class());
    for (c, n) in per_class {
        println!("  class {c}: {n} points");
    }
    if let Some(path) = args.next() {
        serialize_scene(scene, std::io::BufWriter::new(std::fs::File::create(&path).unwrap())).unwrap();
        println!("wrote {path}");
    }
}
