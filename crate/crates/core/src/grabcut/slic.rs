//! SLIC-style superpoint oversegmentation of a voxel grid.

use super::voxel::VoxelGrid;
use super::GrabCutError;

#[derive(Debug, Clone, PartialEq)]
pub struct Superpoint {
    /// Member voxel indices, ascending.
    pub voxels: Vec<usize>,
    /// Point-weighted centroid of the member voxels.
    pub centroid: [f64; 3],
    pub color: Option<[f64; 3]>,
    pub point_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpointSeg {
    /// Superpoint id of every voxel.
    pub labels: Vec<usize>,
    pub superpoints: Vec<Superpoint>,
}

impl SuperpointSeg {
    pub fn len(&self) -> usize {
        self.superpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superpoints.is_empty()
    }

    pub(crate) fn from_labels(grid: &VoxelGrid, labels: &[usize]) -> Self {
        // compact ids in order of first voxel
        let mut remap = vec![usize::MAX; labels.iter().copied().max().map_or(0, |m| m + 1)];
        let mut next = 0;
        let labels: Vec<usize> = labels
            .iter()
            .map(|&l| {
                if remap[l] == usize::MAX {
                    remap[l] = next;
                    next += 1;
                }
                remap[l]
            })
            .collect();
        let mut members = vec![Vec::new(); next];
        for (v, &l) in labels.iter().enumerate() {
            members[l].push(v);
        }
        let superpoints = members
            .into_iter()
            .map(|voxels| {
                let mut n = 0usize;
                let mut c = [0.0; 3];
                let mut col = Some([0.0; 3]);
                for &v in &voxels {
                    let vox = &grid.voxels[v];
                    let w = vox.points.len();
                    n += w;
                    for a in 0..3 {
                        c[a] += vox.centroid[a] * w as f64;
                    }
                    col = match (col, vox.color) {
                        (Some(acc), Some(vc)) => Some(std::array::from_fn(|a| acc[a] + vc[a] * w as f64)),
                        _ => None,
                    };
                }
                Superpoint {
                    voxels,
                    centroid: c.map(|x| x / n as f64),
                    color: col.map(|x| x.map(|v| v / n as f64)),
                    point_count: n,
                }
            })
            .collect();
        Self { labels, superpoints }
    }
}

#[derive(Debug, Clone, Copy)]
struct Center {
    pos: [f64; 3],
    color: Option<[f64; 3]>,
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Seeds on a regular lattice over the occupied extent, snapped to the
/// nearest occupied voxel. Returns exactly `k` distinct voxel indices.
fn lattice_seeds(grid: &VoxelGrid, k: usize, spacing: f64) -> Vec<usize> {
    let cents: Vec<[f64; 3]> = grid.voxels.iter().map(|v| v.centroid).collect();
    let lo: [f64; 3] = std::array::from_fn(|a| cents.iter().map(|c| c[a]).fold(f64::INFINITY, f64::min));
    let hi: [f64; 3] = std::array::from_fn(|a| cents.iter().map(|c| c[a]).fold(f64::NEG_INFINITY, f64::max));
    let counts: [usize; 3] = std::array::from_fn(|a| (((hi[a] - lo[a]) / spacing).round() as usize).max(1));
    let mut seeds: Vec<usize> = Vec::new();
    let mut taken = vec![false; cents.len()];
    for ix in 0..counts[0] {
        for iy in 0..counts[1] {
            for iz in 0..counts[2] {
                let idx = [ix, iy, iz];
                let q: [f64; 3] = std::array::from_fn(|a| {
                    lo[a] + (hi[a] - lo[a]) * (idx[a] as f64 + 0.5) / counts[a] as f64
                });
                let nearest = (0..cents.len())
                    .min_by(|&i, &j| dist2(cents[i], q).total_cmp(&dist2(cents[j], q)).then(i.cmp(&j)))
                    .expect("grid is non-empty");
                if !taken[nearest] {
                    taken[nearest] = true;
                    seeds.push(nearest);
                }
            }
        }
    }
    if seeds.len() > k {
        // even stride through lattice order keeps the coverage uniform
        let n = seeds.len();
        seeds = (0..k).map(|i| seeds[i * n / k]).collect();
    }
    while seeds.len() < k {
        // farthest-point fill
        let far = (0..cents.len())
            .filter(|&i| !seeds.contains(&i))
            .max_by(|&i, &j| {
                let di = seeds.iter().map(|&s| dist2(cents[i], cents[s])).fold(f64::INFINITY, f64::min);
                let dj = seeds.iter().map(|&s| dist2(cents[j], cents[s])).fold(f64::INFINITY, f64::min);
                di.total_cmp(&dj).then(j.cmp(&i))
            })
            .expect("k never exceeds the voxel count");
        seeds.push(far);
    }
    seeds
}

/// Oversegments occupied voxels into at most `target_count` compact clusters.
///
/// Distance is `spatial / S + compactness * color` with
/// `S = (volume / target_count)^(1/3)`; the color term vanishes without colors.
pub fn slic_superpoints(
    grid: &VoxelGrid,
    target_count: usize,
    compactness: f64,
    max_iters: usize,
) -> Result<SuperpointSeg, GrabCutError> {
    let n = grid.len();
    if target_count == 0 || target_count > n {
        return Err(GrabCutError::SuperpointCount {
            requested: target_count,
            voxels: n,
        });
    }
    if target_count == n {
        return Ok(SuperpointSeg::from_labels(grid, &(0..n).collect::<Vec<_>>()));
    }
    if target_count == 1 {
        return Ok(SuperpointSeg::from_labels(grid, &vec![0; n]));
    }

    let volume: f64 = (0..3)
        .map(|a| {
            let keys = grid.voxels.iter().map(|v| v.key[a]);
            let span = keys.clone().max().unwrap() - keys.min().unwrap() + 1;
            span as f64 * grid.voxel_size
        })
        .product();
    let spacing = (volume / target_count as f64).cbrt();

    let mut centers: Vec<Center> = lattice_seeds(grid, target_count, spacing)
        .into_iter()
        .map(|v| Center {
            pos: grid.voxels[v].centroid,
            color: grid.voxels[v].color,
        })
        .collect();

    let distance = |v: usize, c: &Center| -> f64 {
        let vox = &grid.voxels[v];
        let spatial = dist2(vox.centroid, c.pos).sqrt() / spacing;
        let feature = match (vox.color, c.color) {
            (Some(a), Some(b)) => dist2(a, b).sqrt(),
            _ => 0.0,
        };
        spatial + compactness * feature
    };

    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iters.max(1) {
        let mut changed = 0;
        for (v, label) in labels.iter_mut().enumerate() {
            let best = (0..centers.len())
                .min_by(|&a, &b| distance(v, &centers[a]).total_cmp(&distance(v, &centers[b])).then(a.cmp(&b)))
                .expect("at least one center");
            if *label != best {
                *label = best;
                changed += 1;
            }
        }
        if changed == 0 {
            break;
        }
        let mut sums = vec![([0.0; 3], [0.0; 3], 0usize, true); centers.len()];
        for (v, &l) in labels.iter().enumerate() {
            let vox = &grid.voxels[v];
            let s = &mut sums[l];
            for a in 0..3 {
                s.0[a] += vox.centroid[a];
            }
            match vox.color {
                Some(c) => (0..3).for_each(|a| s.1[a] += c[a]),
                None => s.3 = false,
            }
            s.2 += 1;
        }
        for (c, (pos, col, cnt, has_color)) in centers.iter_mut().zip(sums) {
            if cnt == 0 {
                continue;
            }
            c.pos = pos.map(|x| x / cnt as f64);
            c.color = has_color.then(|| col.map(|x| x / cnt as f64));
        }
    }
    Ok(SuperpointSeg::from_labels(grid, &labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grabcut::voxel::voxelize;
    use crate::scene::Point;

    fn blob(origin: [f64; 3], side: usize, step: f64) -> Vec<Point> {
        let mut v = Vec::new();
        for i in 0..side {
            for j in 0..side {
                for k in 0..side {
                    v.push(Point::new(
                        origin[0] + i as f64 * step,
                        origin[1] + j as f64 * step,
                        origin[2] + k as f64 * step,
                    ));
                }
            }
        }
        v
    }

    #[test]
    fn k_equals_voxel_count_is_identity() {
        let g = voxelize(&blob([0.0; 3], 3, 1.0), 1.0).unwrap();
        let seg = slic_superpoints(&g, g.len(), 1.0, 10).unwrap();
        assert_eq!(seg.len(), g.len());
        assert!(seg.superpoints.iter().all(|s| s.voxels.len() == 1));
    }

    #[test]
    fn k_one_is_single_superpoint() {
        let g = voxelize(&blob([0.0; 3], 3, 1.0), 1.0).unwrap();
        let seg = slic_superpoints(&g, 1, 1.0, 10).unwrap();
        assert_eq!(seg.len(), 1);
        assert_eq!(seg.superpoints[0].voxels.len(), 27);
    }

    #[test]
    fn out_of_range_count() {
        let g = voxelize(&blob([0.0; 3], 2, 1.0), 1.0).unwrap();
        assert!(slic_superpoints(&g, 0, 1.0, 10).is_err());
        assert!(slic_superpoints(&g, 9, 1.0, 10).is_err());
    }

    #[test]
    fn ids_partition_the_voxels() {
        let g = voxelize(&blob([0.0; 3], 6, 0.1), 0.1).unwrap();
        let seg = slic_superpoints(&g, 7, 1.0, 20).unwrap();
        let mut seen = vec![0; g.len()];
        for sp in &seg.superpoints {
            assert!(!sp.voxels.is_empty());
            for &v in &sp.voxels {
                seen[v] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert!(seg.len() <= 7);
    }
}
