//! Runs 3D GrabCut in every box of a synthetic scene whose boxes are grown
//! by 10 cm, so they also take in floor and wall, and scores the foreground
//! masks against the instance ground truth.
//!
//! cargo run --release --example grabcut_box -- [seed]

use boxseg::bench::{generate_synthetic_scene, SynthSpec};
use boxseg::grabcut::{grabcut_box, GrabCutParams};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let synth = generate_synthetic_scene(&SynthSpec {
        rooms: 1,
        box_dilation: 0.1,
        seed,
        ..Default::default()
    })
    .unwrap();
    let params = GrabCutParams::default();
    for (b, bbox) in synth.scene.boxes.iter().enumerate() {
        let mask = grabcut_box(&synth.scene, bbox, &params, seed).unwrap();
        let mut hits = 0;
        let mut fg = 0;
        let mut object = 0;
        for (&i, &f) in mask.indices.iter().zip(&mask.foreground) {
            let own = synth.instance[i] == Some(b);
            fg += f as usize;
            object += own as usize;
            hits += (f == own) as usize;
        }
        let n = mask.indices.len() as f64;
        println!(
            "box {b} (class {}): {} points, {object} on the object, {fg} foreground, accuracy {:.3} (all foreground: {:.3})",
            bbox.class_id,
            mask.indices.len(),
            hits as f64 / n,
            object as f64 / n
        );
    }
}
