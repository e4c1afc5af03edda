//! Uniform-grid spatial hashing used for box lookups and radius queries.

use std::collections::HashMap;

use crate::scene::{BoundingBox, Point};

pub type Cell = [i64; 3];

#[inline]
fn cell_of(p: [f64; 3], origin: [f64; 3], size: f64) -> Cell {
    std::array::from_fn(|a| ((p[a] - origin[a]) / size).floor() as i64)
}

/// Box index over a uniform grid. Boxes covering too many cells are kept in
/// an overflow list that is tested against every query.
#[derive(Debug, Clone)]
pub struct BoxGrid {
    origin: [f64; 3],
    cell: f64,
    cells: HashMap<Cell, Vec<usize>>,
    overflow: Vec<usize>,
}

const MAX_CELLS_PER_BOX: i64 = 4096;

impl BoxGrid {
    pub fn new(boxes: &[BoundingBox]) -> Self {
        let mut origin = [0.0; 3];
        let mut cell = 1.0;
        if !boxes.is_empty() {
            origin = std::array::from_fn(|a| boxes.iter().map(|b| b.min[a]).fold(f64::INFINITY, f64::min));
            let mean_extent =
                boxes.iter().map(|b| b.size().into_iter().fold(0.0, f64::max)).sum::<f64>() / boxes.len() as f64;
            if mean_extent.is_finite() && mean_extent > 0.0 {
                cell = mean_extent;
            }
        }
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        let mut overflow = Vec::new();
        for (i, b) in boxes.iter().enumerate() {
            let lo = cell_of(b.min, origin, cell);
            let hi = cell_of(b.max, origin, cell);
            let count: i64 = (0..3).map(|a| hi[a] - lo[a] + 1).product();
            if count > MAX_CELLS_PER_BOX {
                overflow.push(i);
                continue;
            }
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        cells.entry([x, y, z]).or_default().push(i);
                    }
                }
            }
        }
        Self {
            origin,
            cell,
            cells,
            overflow,
        }
    }

    /// Candidate boxes for `p`, in ascending index order. May include boxes
    /// that do not contain `p`.
    pub fn candidates(&self, p: &Point) -> Vec<usize> {
        let key = cell_of(p.xyz(), self.origin, self.cell);
        let mut out: Vec<usize> = self.overflow.clone();
        if let Some(v) = self.cells.get(&key) {
            out.extend_from_slice(v);
        }
        out.sort_unstable();
        out
    }
}

/// Point index over a uniform grid for fixed-radius neighborhood queries.
#[derive(Debug, Clone)]
pub struct PointGrid {
    origin: [f64; 3],
    cell: f64,
    cells: HashMap<Cell, Vec<usize>>,
}

impl PointGrid {
    pub fn new(points: &[Point], cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell size must be positive");
        let origin = if points.is_empty() {
            [0.0; 3]
        } else {
            std::array::from_fn(|a| points.iter().map(|p| p.xyz()[a]).fold(f64::INFINITY, f64::min))
        };
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(cell_of(p.xyz(), origin, cell)).or_default().push(i);
        }
        Self { origin, cell, cells }
    }

    /// Indices of points `q` whose squared distance to `center`, measured on
    /// the axes selected by `axes`, is at most `radius²`. Results are sorted.
    pub fn within(&self, points: &[Point], center: [f64; 3], radius: f64, axes: [bool; 3]) -> Vec<usize> {
        let lo = cell_of(
            std::array::from_fn(|a| if axes[a] { center[a] - radius } else { f64::NEG_INFINITY }),
            self.origin,
            self.cell,
        );
        let hi = cell_of(
            std::array::from_fn(|a| if axes[a] { center[a] + radius } else { f64::INFINITY }),
            self.origin,
            self.cell,
        );
        let r2 = radius * radius;
        let mut out = Vec::new();
        let mut visit = |v: &Vec<usize>| {
            for &i in v {
                let q = points[i].xyz();
                let d2: f64 = (0..3).filter(|&a| axes[a]).map(|a| (q[a] - center[a]).powi(2)).sum();
                if d2 <= r2 {
                    out.push(i);
                }
            }
        };
        if axes.iter().all(|&a| a) {
            for x in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for z in lo[2]..=hi[2] {
                        if let Some(v) = self.cells.get(&[x, y, z]) {
                            visit(v);
                        }
                    }
                }
            }
        } else {
            // unbounded axes: scan cells whose bounded coordinates match
            for (key, v) in &self.cells {
                if (0..3).all(|a| !axes[a] || (lo[a]..=hi[a]).contains(&key[a])) {
                    visit(v);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Exact k nearest neighbors (excluding the point itself) by brute force.
/// Ties are broken by index. Returns fewer than `k` when not enough points exist.
pub fn knn_brute_force(xyz: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    use rayon::prelude::*;
    (0..xyz.len())
        .into_par_iter()
        .map(|i| {
            let p = xyz[i];
            let mut d: Vec<(f64, usize)> = xyz
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2), j))
                .collect();
            let k = k.min(d.len());
            if k == 0 {
                return Vec::new();
            }
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            d.select_nth_unstable_by(k - 1, cmp);
            d.truncate(k);
            d.sort_unstable_by(cmp);
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knn_excludes_self_and_orders_by_distance() {
        let xyz = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.5, 0.0, 0.0]];
        let nn = knn_brute_force(&xyz, 2);
        assert_eq!(nn[0], vec![3, 1]);
        assert_eq!(nn[2], vec![1, 3]);
    }

    #[test]
    fn knn_with_too_few_points() {
        assert_eq!(knn_brute_force(&[[0.0; 3]], 8), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn radius_query_matches_scan() {
        let pts: Vec<Point> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.37;
                Point::new(t.sin() * 2.0, (t * 1.3).cos() * 2.0, (t * 0.7).sin())
            })
            .collect();
        let grid = PointGrid::new(&pts, 0.3);
        for axes in [[true; 3], [true, true, false]] {
            for c in [[0.0, 0.0, 0.0], [1.0, -1.0, 0.5]] {
                let got = grid.within(&pts, c, 0.7, axes);
                let want: Vec<usize> = (0..pts.len())
                    .filter(|&i| {
                        let q = pts[i].xyz();
                        (0..3).filter(|&a| axes[a]).map(|a| (q[a] - c[a]).powi(2)).sum::<f64>() <= 0.49
                    })
                    .collect();
                assert_eq!(got, want);
            }
        }
    }
}
