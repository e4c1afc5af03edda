//! Unsupervised foreground extraction inside bounding boxes.
//!
//! Each box is voxelized, oversegmented into superpoints, and cut into
//! foreground and background with GMM unaries and contrast-sensitive Potts
//! pairwise terms. Labels are copied back from superpoints to the raw points.

pub mod gmm;
pub mod maxflow;
pub mod slic;
pub mod voxel;

use std::collections::BTreeSet;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gmm::{fit_gmm, Gmm, GmmFit, VARIANCE_FLOOR};
pub use maxflow::{min_cut, FlowNetwork, Segment, SuperpointGraph};
pub use slic::{slic_superpoints, Superpoint, SuperpointSeg};
pub use voxel::{voxelize, Voxel, VoxelGrid};

use crate::partition::PartitionMap;
use crate::scene::{BoundingBox, Point, Provenance, PseudoLabel, PseudoLabelMap, Scene};

#[derive(Debug, Error)]
pub enum GrabCutError {
    #[error("voxel size must be positive and finite, got {0}")]
    InvalidVoxelSize(f64),
    #[error("no points to process")]
    EmptyInput,
    #[error("superpoint count {requested} outside [1, {voxels}]")]
    SuperpointCount { requested: usize, voxels: usize },
    #[error("{samples} samples cannot fit {components} mixture components")]
    TooFewSamples { samples: usize, components: usize },
    #[error("samples must be finite and share one dimension")]
    InvalidSamples,
    #[error("edge ({u},{v}) has invalid weight {weight}")]
    NegativeWeight { u: usize, v: usize, weight: f64 },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("unary energies must be finite")]
    NonFiniteEnergy,
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
}

/// Where the initial background comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Seeding {
    /// Scene points in a band around the box, fixed to background; box points
    /// start as foreground. Falls back to `Shell` when the band is empty.
    Context,
    /// Superpoints in the inner core start as foreground, the rest touching
    /// the boundary shell as background; no hard constraints.
    Shell,
}

/// Superpoint features seen by the color models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Appearance {
    /// Height relative to the box center and mean normal verticality.
    Geometric,
    /// Centroid relative to the box center.
    Xyz,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrabCutParams {
    pub voxel_size: f64,
    /// Superpoint count; `None` picks `max(8, voxels / voxels_per_superpoint)`.
    pub k_sp: Option<usize>,
    pub voxels_per_superpoint: usize,
    pub compactness: f64,
    pub slic_iters: usize,
    pub k_gmm: usize,
    pub gmm_iters: usize,
    pub lambda_pair: f64,
    pub beta_scale: f64,
    pub outer_iters: usize,
    /// Fraction of each box extent kept by the centered foreground seed core.
    pub core_fraction: f64,
    /// Thickness of the boundary shell as a fraction of each box extent.
    pub shell_fraction: f64,
    pub seeding: Seeding,
    /// Width in meters of the band used by [`Seeding::Context`].
    pub context_margin: f64,
    pub appearance: Appearance,
}

impl Default for GrabCutParams {
    fn default() -> Self {
        Self {
            voxel_size: 0.05,
            k_sp: None,
            voxels_per_superpoint: 2,
            compactness: 1.0,
            slic_iters: 10,
            k_gmm: 3,
            gmm_iters: 50,
            lambda_pair: 1.0,
            beta_scale: 0.5,
            outer_iters: 5,
            core_fraction: 0.75,
            shell_fraction: 0.1,
            seeding: Seeding::Context,
            context_margin: 0.1,
            appearance: Appearance::Geometric,
        }
    }
}

impl GrabCutParams {
    pub fn validate(&self) -> Result<(), GrabCutError> {
        let bad = |m: &str| Err(GrabCutError::InvalidParams(m.to_string()));
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(GrabCutError::InvalidVoxelSize(self.voxel_size));
        }
        if self.k_sp == Some(0) || self.voxels_per_superpoint == 0 {
            return bad("k_sp and voxels_per_superpoint must be at least 1");
        }
        if self.k_gmm == 0 {
            return bad("k_gmm must be at least 1");
        }
        if !(self.lambda_pair >= 0.0) || !(self.beta_scale >= 0.0) || !(self.compactness >= 0.0) {
            return bad("lambda_pair, beta_scale and compactness must be non-negative");
        }
        if !(self.core_fraction > 0.0 && self.core_fraction <= 1.0) {
            return bad("core_fraction must be in (0, 1]");
        }
        if !(self.shell_fraction >= 0.0 && self.shell_fraction < 0.5) {
            return bad("shell_fraction must be in [0, 0.5)");
        }
        if !(self.context_margin >= 0.0 && self.context_margin.is_finite()) {
            return bad("context_margin must be non-negative");
        }
        Ok(())
    }
}

/// Foreground decision for the points of one box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxMask {
    /// Scene indices of the processed points.
    pub indices: Vec<usize>,
    pub foreground: Vec<bool>,
}

fn in_core(p: [f64; 3], b: &BoundingBox, core: f64) -> bool {
    let c = b.center();
    let s = b.size();
    (0..3).all(|a| (p[a] - c[a]).abs() <= 0.5 * s[a] * core)
}

fn in_shell(p: [f64; 3], b: &BoundingBox, shell: f64) -> bool {
    let s = b.size();
    (0..3).any(|a| {
        let t = shell * s[a];
        p[a] - b.min[a] <= t || b.max[a] - p[a] <= t
    })
}

/// Feature vector of a superpoint, plus its mean color when there is one.
/// Geometric features leave out horizontal position so that floor or wall
/// seen around the box looks the same as the part of it inside.
fn superpoint_feature(
    sp: &Superpoint,
    members: &[usize],
    verticality: &[f64],
    center: [f64; 3],
    appearance: Appearance,
) -> Vec<f64> {
    let mut f = match appearance {
        Appearance::Geometric => {
            let nz = members.iter().map(|&i| verticality[i]).sum::<f64>() / members.len() as f64;
            vec![sp.centroid[2] - center[2], nz]
        }
        Appearance::Xyz => (0..3).map(|a| sp.centroid[a] - center[a]).collect(),
    };
    if let Some(c) = sp.color {
        f.extend_from_slice(&c);
    }
    f
}

/// Neighborhood used for point normals.
const NORMAL_K: usize = 8;
const NORMAL_RADIUS: f64 = 0.2;

/// Unary cost that keeps context superpoints on the background side.
const HARD: f64 = 1e9;

/// Runs the full voxel → superpoint → cut pipeline on `points`, the points of
/// `bbox` to separate. `context` holds scene points just outside the box;
/// voxels made mostly of them are split off their superpoints and fixed to
/// background, and everything else starts as foreground. Without context the boundary shell inside the
/// box seeds the background instead. Returns one foreground flag per point.
pub fn grabcut_points(
    points: &[Point],
    context: &[Point],
    bbox: &BoundingBox,
    params: &GrabCutParams,
    seed: u64,
) -> Result<Vec<bool>, GrabCutError> {
    params.validate()?;
    if points.is_empty() {
        return Err(GrabCutError::EmptyInput);
    }
    let context = if params.seeding == Seeding::Context { context } else { &[] };
    let all: Vec<Point> = points.iter().chain(context).copied().collect();
    let grid = voxelize(&all, params.voxel_size)?;
    let k_sp = params
        .k_sp
        .unwrap_or_else(|| (grid.len() / params.voxels_per_superpoint).max(8))
        .clamp(1, grid.len());
    let seg = slic_superpoints(&grid, k_sp, params.compactness, params.slic_iters)?;
    // a voxel belongs to the context side when most of its points do; every
    // superpoint is split along that side so context never mixes with the box
    let voxel_outside: Vec<bool> = grid
        .voxels
        .iter()
        .map(|v| 2 * v.points.iter().filter(|&&i| i >= points.len()).count() > v.points.len())
        .collect();
    let seg = if voxel_outside.contains(&true) {
        let split: Vec<usize> = seg
            .labels
            .iter()
            .zip(&voxel_outside)
            .map(|(&l, &o)| 2 * l + o as usize)
            .collect();
        SuperpointSeg::from_labels(&grid, &split)
    } else {
        seg
    };
    let n_sp = seg.len();
    let center = bbox.center();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_sp];
    for (v, vox) in grid.voxels.iter().enumerate() {
        members[seg.labels[v]].extend(&vox.points);
    }
    let verticality = match params.appearance {
        Appearance::Geometric => crate::features::verticality(&all, NORMAL_K, NORMAL_RADIUS),
        Appearance::Xyz => Vec::new(),
    };
    let feats: Vec<Vec<f64>> = seg
        .superpoints
        .iter()
        .zip(&members)
        .map(|(sp, m)| superpoint_feature(sp, m, &verticality, center, params.appearance))
        .collect();
    let fixed: Vec<bool> = seg.superpoints.iter().map(|sp| voxel_outside[sp.voxels[0]]).collect();
    let inside: Vec<usize> = members
        .iter()
        .map(|m| m.iter().filter(|&&i| i < points.len()).count())
        .collect();

    let mut initial: Vec<Segment> = if fixed.contains(&true) {
        fixed
            .iter()
            .map(|&f| if f { Segment::Background } else { Segment::Foreground })
            .collect()
    } else {
        let mut touches_shell = vec![false; n_sp];
        for (v, vox) in grid.voxels.iter().enumerate() {
            if vox.points.iter().any(|&i| in_shell(all[i].xyz(), bbox, params.shell_fraction)) {
                touches_shell[seg.labels[v]] = true;
            }
        }
        (0..n_sp)
            .map(|i| {
                if in_core(seg.superpoints[i].centroid, bbox, params.core_fraction) || !touches_shell[i] {
                    Segment::Foreground
                } else {
                    Segment::Background
                }
            })
            .collect()
    };
    let has_fg = |labels: &[Segment]| (0..n_sp).any(|i| labels[i] == Segment::Foreground && inside[i] > 0);
    if !has_fg(&initial) {
        let nearest = (0..n_sp)
            .filter(|&i| inside[i] > 0)
            .min_by(|&a, &b| {
                let d = |i: usize| -> f64 { (0..3).map(|k| (seg.superpoints[i].centroid[k] - center[k]).powi(2)).sum() };
                d(a).total_cmp(&d(b)).then(a.cmp(&b))
            })
            .expect("a superpoint holds box points");
        initial[nearest] = Segment::Foreground;
    }

    let mut labels = initial.clone();
    if labels.contains(&Segment::Background) {
        let graph_edges = adjacency(&grid, &seg);
        let mean_d2 = if graph_edges.is_empty() {
            0.0
        } else {
            graph_edges
                .iter()
                .map(|&(u, v)| sq_dist(&feats[u], &feats[v]))
                .sum::<f64>()
                / graph_edges.len() as f64
        };
        let beta = if mean_d2 > 0.0 { params.beta_scale / mean_d2 } else { 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        for _ in 0..params.outer_iters {
            let fg: Vec<Vec<f64>> = (0..n_sp)
                .filter(|&i| labels[i] == Segment::Foreground)
                .map(|i| feats[i].clone())
                .collect();
            let bg: Vec<Vec<f64>> = (0..n_sp)
                .filter(|&i| labels[i] == Segment::Background)
                .map(|i| feats[i].clone())
                .collect();
            if fg.is_empty() || bg.is_empty() {
                break;
            }
            let fg_model = fit_gmm(&fg, params.k_gmm.min(fg.len()), params.gmm_iters, rng.next_u64())?.model;
            let bg_model = fit_gmm(&bg, params.k_gmm.min(bg.len()), params.gmm_iters, rng.next_u64())?.model;
            let mut graph = SuperpointGraph::new(n_sp);
            for (i, f) in feats.iter().enumerate() {
                let fg_cost = if fixed[i] { HARD } else { -fg_model.log_density(f) };
                graph.set_unary(i, fg_cost, -bg_model.log_density(f));
            }
            for &(u, v) in &graph_edges {
                graph.add_edge(u, v, params.lambda_pair * (-beta * sq_dist(&feats[u], &feats[v])).exp())?;
            }
            let next = min_cut(&graph)?;
            if !has_fg(&next) {
                labels = initial.clone();
                break;
            }
            if next == labels {
                break;
            }
            labels = next;
        }
    }

    Ok(grid.point_voxel[..points.len()]
        .iter()
        .map(|&v| labels[seg.labels[v]] == Segment::Foreground)
        .collect())
}

/// Scene points in the band of width `margin` around `bbox`.
fn context_points(scene: &Scene, bbox: &BoundingBox, margin: f64) -> Vec<Point> {
    if margin == 0.0 {
        return Vec::new();
    }
    let outer = bbox.dilated(margin);
    scene
        .points
        .iter()
        .filter(|p| outer.contains(p) && !bbox.contains(p))
        .copied()
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Superpoint pairs owning 6-adjacent voxels, sorted and deduplicated.
fn adjacency(grid: &VoxelGrid, seg: &SuperpointSeg) -> Vec<(usize, usize)> {
    let index: std::collections::HashMap<[i64; 3], usize> =
        grid.voxels.iter().enumerate().map(|(i, v)| (v.key, i)).collect();
    let mut edges = BTreeSet::new();
    for (v, vox) in grid.voxels.iter().enumerate() {
        for axis in 0..3 {
            let mut k = vox.key;
            k[axis] += 1;
            if let Some(&w) = index.get(&k) {
                let (a, b) = (seg.labels[v], seg.labels[w]);
                if a != b {
                    edges.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    edges.into_iter().collect()
}

/// Separates every point inside `bbox`.
pub fn grabcut_box(scene: &Scene, bbox: &BoundingBox, params: &GrabCutParams, seed: u64) -> Result<BoxMask, GrabCutError> {
    let indices: Vec<usize> = (0..scene.len()).filter(|&i| bbox.contains(&scene.points[i])).collect();
    if indices.is_empty() {
        return Err(GrabCutError::EmptyInput);
    }
    let pts: Vec<Point> = indices.iter().map(|&i| scene.points[i]).collect();
    let context = context_points(scene, bbox, params.context_margin);
    let foreground = grabcut_points(&pts, &context, bbox, params, seed)?;
    Ok(BoxMask { indices, foreground })
}

fn box_seed(seed: u64, box_index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(box_index as u64);
    rng.next_u64()
}

/// Foreground pseudo labels for the whole scene. Each box is cut on its
/// unique (non-ambiguous) points; boxes without such points are skipped.
pub fn grabcut_scene(
    scene: &Scene,
    partition: &PartitionMap,
    params: &GrabCutParams,
    seed: u64,
) -> Result<PseudoLabelMap, GrabCutError> {
    params.validate()?;
    let mut per_box: Vec<Vec<usize>> = vec![Vec::new(); scene.boxes.len()];
    for i in 0..scene.len() {
        if let Some(b) = partition.unique_box(i) {
            per_box[b].push(i);
        }
    }
    let masks: Vec<Result<Vec<(usize, bool)>, GrabCutError>> = per_box
        .par_iter()
        .enumerate()
        .map(|(b, idx)| {
            if idx.is_empty() {
                return Ok(Vec::new());
            }
            let pts: Vec<Point> = idx.iter().map(|&i| scene.points[i]).collect();
            let context = context_points(scene, &scene.boxes[b], params.context_margin);
            let fg = grabcut_points(&pts, &context, &scene.boxes[b], params, box_seed(seed, b))?;
            Ok(idx.iter().copied().zip(fg).collect())
        })
        .collect();
    let mut labels = PseudoLabelMap::unlabeled(scene.len());
    for (b, mask) in masks.into_iter().enumerate() {
        for (i, fg) in mask? {
            if fg {
                labels.set(i, PseudoLabel::new(scene.boxes[b].class_id, 1.0, Provenance::GrabCut));
            }
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_core_points_stay_foreground() {
        let bbox = BoundingBox::new([-1.0; 3], [1.0; 3], 2).unwrap();
        let pts: Vec<Point> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.1;
                Point::new(0.3 * t.sin(), 0.3 * (1.7 * t).cos(), 0.3 * (0.3 * t).sin())
            })
            .collect();
        let fg = grabcut_points(&pts, &[], &bbox, &GrabCutParams::default(), 1).unwrap();
        assert!(fg.iter().all(|&f| f));
    }

    #[test]
    fn empty_box_is_an_error() {
        let mut s = Scene::empty(3);
        s.points.push(Point::new(5.0, 5.0, 5.0));
        let bbox = BoundingBox::new([0.0; 3], [1.0; 3], 2).unwrap();
        assert!(matches!(grabcut_box(&s, &bbox, &GrabCutParams::default(), 0), Err(GrabCutError::EmptyInput)));
    }
}
