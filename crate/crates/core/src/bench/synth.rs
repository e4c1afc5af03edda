//! Procedural indoor scenes with exact boxes, tile tags and ground truth.
//!
//! Each room is a floor grid plus four walls (the two background classes)
//! with objects standing on the floor. Object shape follows the class:
//! tables, chairs, cabinets and bins, cycling and growing for classes
//! beyond four. Rooms are laid out side by side along x and split into
//! blocks by horizontal tile and height layer; every block is one subcloud
//! tagged with the classes it holds.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::scene::{BoundingBox, Point, Scene, Subcloud, SubcloudTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub rooms: usize,
    pub objects_per_room: usize,
    /// Foreground classes; floor and wall are appended after them.
    pub classes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Sampling step on floor and object surfaces.
    pub spacing: f64,
    pub wall_spacing: f64,
    pub room_size: [f64; 2],
    pub wall_height: f64,
    /// Horizontal edge length of the blocks that form subclouds.
    pub tile_size: f64,
    /// Vertical extent of those blocks.
    pub tile_height: f64,
    /// Margin added to every box on each side.
    pub box_dilation: f64,
    /// Minimum horizontal gap between object footprints.
    pub min_gap: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            rooms: 5,
            objects_per_room: 4,
            classes: 4,
            noise_sigma: 0.005,
            seed: 0,
            spacing: 0.15,
            wall_spacing: 0.25,
            room_size: [5.0, 4.0],
            wall_height: 2.5,
            tile_size: 1.0,
            tile_height: 1.0,
            box_dilation: 0.0,
            min_gap: 0.1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidSynthSpec(m.to_string()));
        if self.classes == 0 || self.classes + 2 > crate::scene::MAX_CLASSES {
            return bad("classes must be in [1, 253]");
        }
        let positive = [
            self.spacing,
            self.wall_spacing,
            self.room_size[0],
            self.room_size[1],
            self.wall_height,
            self.tile_size,
            self.tile_height,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("sizes and spacings must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.box_dilation >= 0.0) {
            return bad("noise and dilation must be non-negative");
        }
        Ok(())
    }

    pub fn floor_class(&self) -> u8 {
        self.classes as u8
    }

    pub fn wall_class(&self) -> u8 {
        self.classes as u8 + 1
    }
}

/// A generated scene with the instance (box index) of every object point.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub scene: Scene,
    pub instance: Vec<Option<usize>>,
}

struct Sampler<'a> {
    rng: &'a mut ChaCha8Rng,
    noise: Normal<f64>,
    out: Vec<[f64; 3]>,
}

impl Sampler<'_> {
    fn push(&mut self, p: [f64; 3]) {
        let n = self.noise;
        let q = [p[0] + n.sample(self.rng), p[1] + n.sample(self.rng), p[2] + n.sample(self.rng)];
        self.out.push(q);
    }

    /// Grid samples over `origin + a·u + b·v`, `a ∈ [0, |u|]`, `b ∈ [0, |v|]`.
    fn rect(&mut self, origin: [f64; 3], u: [f64; 3], v: [f64; 3], step: f64) {
        let lu = norm(u);
        let lv = norm(v);
        let nu = ((lu / step).round() as usize).max(1);
        let nv = ((lv / step).round() as usize).max(1);
        for i in 0..nu {
            for j in 0..nv {
                let a = (i as f64 + 0.5) / nu as f64;
                let b = (j as f64 + 0.5) / nv as f64;
                self.push(std::array::from_fn(|k| origin[k] + a * u[k] + b * v[k]));
            }
        }
    }

    fn post(&mut self, x: f64, y: f64, z0: f64, z1: f64, step: f64) {
        let n = (((z1 - z0) / step).round() as usize).max(1);
        for i in 0..n {
            self.push([x, y, z0 + (i as f64 + 0.5) / n as f64 * (z1 - z0)]);
        }
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Footprint half-extents (x, y) and point samples of an object centered at
/// the origin on the floor.
fn object_points(class: usize, rng: &mut ChaCha8Rng, sampler_noise: Normal<f64>, step: f64) -> Vec<[f64; 3]> {
    let grow = 1.0 + 0.25 * (class / 4) as f64;
    let mut j = |v: f64| v * grow * rng.random_range(0.9..1.1);
    let dims = match class % 4 {
        0 => [j(1.2), j(0.8), j(0.75)],
        1 => [j(0.45), j(0.45), j(0.9)],
        2 => [j(0.6), j(0.5), j(1.6)],
        _ => [j(0.4), j(0.4), j(0.35)],
    };
    let rotate = rng.random_bool(0.5);
    let mut s = Sampler {
        rng,
        noise: sampler_noise,
        out: Vec::new(),
    };
    let [w, d, h] = dims;
    let (hx, hy) = (w / 2.0, d / 2.0);
    let leg = step / 2.0;
    match class % 4 {
        0 => {
            s.rect([-hx, -hy, h], [w, 0.0, 0.0], [0.0, d, 0.0], step);
            s.rect([-hx, -hy, h - 0.04], [w, 0.0, 0.0], [0.0, d, 0.0], step);
            for (x, y) in [(-hx + 0.05, -hy + 0.05), (hx - 0.05, -hy + 0.05), (-hx + 0.05, hy - 0.05), (hx - 0.05, hy - 0.05)] {
                s.post(x, y, 0.0, h - 0.04, leg);
            }
        }
        1 => {
            let seat = h / 2.0;
            s.rect([-hx, -hy, seat], [w, 0.0, 0.0], [0.0, d, 0.0], step * 0.7);
            s.rect([-hx, hy, seat], [w, 0.0, 0.0], [0.0, 0.0, h - seat], step * 0.7);
            for (x, y) in [(-hx + 0.03, -hy + 0.03), (hx - 0.03, -hy + 0.03), (-hx + 0.03, hy - 0.03), (hx - 0.03, hy - 0.03)] {
                s.post(x, y, 0.0, seat, leg);
            }
        }
        2 => {
            s.rect([-hx, -hy, h], [w, 0.0, 0.0], [0.0, d, 0.0], step);
            s.rect([-hx, -hy, 0.0], [w, 0.0, 0.0], [0.0, 0.0, h], step);
            s.rect([-hx, hy, 0.0], [w, 0.0, 0.0], [0.0, 0.0, h], step);
            s.rect([-hx, -hy, 0.0], [0.0, d, 0.0], [0.0, 0.0, h], step);
            s.rect([hx, -hy, 0.0], [0.0, d, 0.0], [0.0, 0.0, h], step);
        }
        _ => {
            let r = hx;
            let around = ((std::f64::consts::TAU * r / (step * 0.7)).round() as usize).max(6);
            let up = ((h / (step * 0.7)).round() as usize).max(1);
            for a in 0..around {
                let t = a as f64 / around as f64 * std::f64::consts::TAU;
                for k in 0..up {
                    s.push([r * t.cos(), r * t.sin(), (k as f64 + 0.5) / up as f64 * h]);
                }
            }
        }
    }
    let mut pts = s.out;
    if rotate {
        for p in &mut pts {
            *p = [-p[1], p[0], p[2]];
        }
    }
    pts
}

struct Placed {
    lo: [f64; 2],
    hi: [f64; 2],
}

/// Generates a scene; identical specs give identical scenes.
pub fn generate_synthetic_scene(spec: &SynthSpec) -> Result<SyntheticScene, BenchError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
    let [room_w, room_d] = spec.room_size;
    let tiles_x = ((room_w / spec.tile_size).ceil() as usize).max(1);
    let tiles_y = ((room_d / spec.tile_size).ceil() as usize).max(1);
    let tiles_per_layer = tiles_x * tiles_y;
    let floor = spec.floor_class();
    let wall = spec.wall_class();

    // (room, tile, point, class, instance)
    let mut records: Vec<(usize, usize, [f64; 3], u8, Option<usize>)> = Vec::new();
    let mut boxes = Vec::new();
    for room in 0..spec.rooms {
        let ox = room as f64 * (room_w + 2.0);
        let tile_of = |p: [f64; 3]| {
            let tx = (((p[0] - ox) / spec.tile_size).floor().max(0.0) as usize).min(tiles_x - 1);
            let ty = ((p[1] / spec.tile_size).floor().max(0.0) as usize).min(tiles_y - 1);
            let tz = (p[2] / spec.tile_height).floor().max(0.0) as usize;
            tz * tiles_per_layer + ty * tiles_x + tx
        };
        let mut placed: Vec<Placed> = Vec::new();
        for j in 0..spec.objects_per_room {
            let class = (j + room) % spec.classes;
            let local = object_points(class, &mut rng, noise, spec.spacing);
            let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
            for p in &local {
                for k in 0..2 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
            let margin = 0.3;
            let range_x = (margin - lo[0], room_w - margin - hi[0]);
            let range_y = (margin - lo[1], room_d - margin - hi[1]);
            if range_x.0 >= range_x.1 || range_y.0 >= range_y.1 {
                continue;
            }
            let mut spot = None;
            for _ in 0..200 {
                let cx = rng.random_range(range_x.0..range_x.1);
                let cy = rng.random_range(range_y.0..range_y.1);
                let cand = Placed {
                    lo: [cx + lo[0], cy + lo[1]],
                    hi: [cx + hi[0], cy + hi[1]],
                };
                let clear = placed.iter().all(|o| {
                    cand.lo[0] > o.hi[0] + spec.min_gap
                        || o.lo[0] > cand.hi[0] + spec.min_gap
                        || cand.lo[1] > o.hi[1] + spec.min_gap
                        || o.lo[1] > cand.hi[1] + spec.min_gap
                });
                if clear {
                    spot = Some((cx, cy, cand));
                    break;
                }
            }
            let Some((cx, cy, footprint)) = spot else { continue };
            placed.push(footprint);
            let pts: Vec<Point> = local
                .iter()
                .map(|p| Point::new(ox + cx + p[0], cy + p[1], p[2].max(0.0)))
                .collect();
            let bbox = BoundingBox::enclosing(&pts, class as u8)
                .expect("objects have points")
                .dilated(spec.box_dilation);
            let instance = boxes.len();
            boxes.push(bbox);
            for p in pts {
                records.push((room, tile_of(p.xyz()), p.xyz(), class as u8, Some(instance)));
            }
        }

        let covered = |x: f64, y: f64| {
            placed
                .iter()
                .any(|o| x >= o.lo[0] && x <= o.hi[0] && y >= o.lo[1] && y <= o.hi[1])
        };
        let mut s = Sampler {
            rng: &mut rng,
            noise,
            out: Vec::new(),
        };
        s.rect([0.0, 0.0, 0.0], [room_w, 0.0, 0.0], [0.0, room_d, 0.0], spec.spacing);
        let floor_pts: Vec<[f64; 3]> = s.out.drain(..).filter(|p| !covered(p[0], p[1])).collect();
        let (h, ws) = (spec.wall_height, spec.wall_spacing);
        s.rect([0.0, 0.0, 0.0], [room_w, 0.0, 0.0], [0.0, 0.0, h], ws);
        s.rect([0.0, room_d, 0.0], [room_w, 0.0, 0.0], [0.0, 0.0, h], ws);
        s.rect([0.0, 0.0, 0.0], [0.0, room_d, 0.0], [0.0, 0.0, h], ws);
        s.rect([room_w, 0.0, 0.0], [0.0, room_d, 0.0], [0.0, 0.0, h], ws);
        let wall_pts = std::mem::take(&mut s.out);
        for (pts, class) in [(floor_pts, floor), (wall_pts, wall)] {
            for p in pts {
                let q = [ox + p[0], p[1], p[2]];
                records.push((room, tile_of(q), q, class, None));
            }
        }
    }

    records.sort_by_key(|r| (r.0, r.1));
    let class_count = spec.classes + 2;
    let mut points = Vec::with_capacity(records.len());
    let mut gt = Vec::with_capacity(records.len());
    let mut instance = Vec::with_capacity(records.len());
    let mut subclouds = Vec::new();
    let mut start = 0;
    while start < records.len() {
        let key = (records[start].0, records[start].1);
        let mut end = start;
        let mut present = BTreeSet::new();
        while end < records.len() && (records[end].0, records[end].1) == key {
            present.insert(records[end].3);
            end += 1;
        }
        subclouds.push(Subcloud {
            range: start..end,
            tag: SubcloudTag::from_classes(class_count, present).expect("non-empty tile"),
        });
        start = end;
    }
    for (_, _, p, class, inst) in records {
        points.push(Point::from_xyz(p));
        gt.push(class);
        instance.push(inst);
    }
    let scene = Scene::new(
        points,
        boxes,
        subclouds,
        class_count,
        [floor, wall].into_iter().collect(),
        Some(gt),
    )
    .map_err(|e| BenchError::InvalidSynthSpec(e.to_string()))?;
    Ok(SyntheticScene { scene, instance })
}
