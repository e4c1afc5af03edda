//! Splits the points of a scene into inside, ambiguous and outside sets, with
//! and without dilated boxes.
//!
//! cargo run --release --example partition_boxes

use boxseg::bench::{generate_synthetic_scene, SynthSpec};
use boxseg::partition_points;

fn main() {
    for dilation in [0.0, 0.1, 0.2] {
        let scene = generate_synthetic_scene(&SynthSpec {
            rooms: 1,
            objects_per_room: 6,
            box_dilation: dilation,
            min_gap: 0.05,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
        .scene;
        let c = partition_points(&scene).counts();
        println!(
            "dilation {dilation:.1}: {} in one box, {} ambiguous, {} outside",
            c.foreground, c.ambiguous, c.background
        );
    }
}
