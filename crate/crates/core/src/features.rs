//! Per-point network inputs derived from xyz coordinates only.

use nalgebra::{Matrix3, SymmetricEigen};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scene::{Point, Scene};
use crate::spatial::PointGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// Chunk-centered x, y and height above the scene floor.
    Xyz,
    /// Chunk-centered x, y and local shape descriptors: column top height,
    /// normal verticality, linearity, planarity and scattering. Absolute
    /// height is left out so that a surface looks the same at every level.
    Geometric,
}

impl FeatureMode {
    pub fn dim(self) -> usize {
        match self {
            Self::Xyz => 3,
            Self::Geometric => 7,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Xyz => "xyz",
            Self::Geometric => "geometric",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "xyz" => Some(Self::Xyz),
            "geometric" => Some(Self::Geometric),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    pub mode: FeatureMode,
    /// Neighbors (including the point) used for covariance descriptors.
    pub local_k: usize,
    /// Initial search radius for those neighbors; doubled until enough are found.
    pub local_radius: f64,
    /// Horizontal radius of the vertical column used for the top height.
    pub column_radius: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            mode: FeatureMode::Xyz,
            local_k: 8,
            local_radius: 0.2,
            column_radius: 0.05,
        }
    }
}

/// Covariance eigen-descriptors `[|n_z|, linearity, planarity, scattering]`.
pub(crate) fn shape_descriptors(points: &[Point], nbrs: &[usize]) -> [f64; 4] {
    if nbrs.len() < 3 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let n = nbrs.len() as f64;
    let mut mean = [0.0; 3];
    for &j in nbrs {
        for (m, v) in mean.iter_mut().zip(points[j].xyz()) {
            *m += v / n;
        }
    }
    let mut cov = Matrix3::zeros();
    for &j in nbrs {
        let p = points[j].xyz();
        let d = nalgebra::Vector3::new(p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]);
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l1 = eig.eigenvalues[order[0]].max(0.0);
    let l2 = eig.eigenvalues[order[1]].max(0.0);
    let l3 = eig.eigenvalues[order[2]].max(0.0);
    if l1 <= 1e-15 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let normal = eig.eigenvectors.column(order[2]);
    [normal[2].abs(), (l1 - l2) / l1, (l2 - l3) / l1, l3 / l1]
}

/// The `k` points closest to `p` (ties by index), searching in growing radii.
fn nearest(grid: &PointGrid, points: &[Point], p: &Point, k: usize, radius: f64) -> Vec<usize> {
    let k = k.min(points.len());
    let mut r = radius;
    loop {
        let found = grid.within(points, p.xyz(), r, [true; 3]);
        if found.len() >= k || found.len() == points.len() {
            let d2 = |j: usize| {
                let q = &points[j];
                (q.x - p.x).powi(2) + (q.y - p.y).powi(2) + (q.z - p.z).powi(2)
            };
            let mut by: Vec<(f64, usize)> = found.into_iter().map(|j| (d2(j), j)).collect();
            by.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            return by.into_iter().take(k).map(|(_, j)| j).collect();
        }
        r *= 2.0;
    }
}

/// `|n_z|` of every point from its `k` nearest neighbors.
pub(crate) fn verticality(points: &[Point], k: usize, radius: f64) -> Vec<f64> {
    let grid = PointGrid::new(points, radius);
    points
        .par_iter()
        .map(|p| shape_descriptors(points, &nearest(&grid, points, p, k, radius))[0])
        .collect()
}

/// Feature matrix (points × [`FeatureMode::dim`]) for every point of `scene`.
/// Horizontal coordinates are centered per chunk; heights are measured from
/// the lowest point of the scene.
pub fn compute_features(scene: &Scene, params: &FeatureParams) -> Array2<f64> {
    let n = scene.len();
    let dim = params.mode.dim();
    let mut out = Array2::zeros((n, dim));
    if n == 0 {
        return out;
    }
    let floor = scene.points.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    for chunk in scene.chunks() {
        let len = chunk.range.len() as f64;
        let cx = scene.points[chunk.range.clone()].iter().map(|p| p.x).sum::<f64>() / len;
        let cy = scene.points[chunk.range.clone()].iter().map(|p| p.y).sum::<f64>() / len;
        for i in chunk.range.clone() {
            let p = &scene.points[i];
            if params.mode == FeatureMode::Xyz {
                out[[i, 0]] = p.x - cx;
                out[[i, 1]] = p.y - cy;
                out[[i, 2]] = p.z - floor;
            }
        }
    }
    if params.mode == FeatureMode::Geometric {
        let local = PointGrid::new(&scene.points, params.local_radius);
        let flat: Vec<Point> = scene.points.iter().map(|p| Point::new(p.x, p.y, 0.0)).collect();
        let column = PointGrid::new(&flat, params.column_radius);
        let rows: Vec<[f64; 5]> = scene
            .points
            .par_iter()
            .map(|p| {
                let col = column.within(&flat, [p.x, p.y, 0.0], params.column_radius, [true; 3]);
                let top = col.iter().map(|&j| scene.points[j].z).fold(p.z, f64::max) - floor;
                let nbrs = nearest(&local, &scene.points, p, params.local_k, params.local_radius);
                let d = shape_descriptors(&scene.points, &nbrs);
                [top, d[0], d[1], d[2], d[3]]
            })
            .collect();
        for (i, r) in rows.iter().enumerate() {
            for (k, v) in r.iter().enumerate() {
                out[[i, 2 + k]] = *v;
            }
        }
    }
    out
}
