use std::collections::BTreeMap;

use super::GrabCutError;
use crate::scene::Point;

#[derive(Debug, Clone, PartialEq)]
pub struct Voxel {
    pub key: [i64; 3],
    /// Indices into the slice that was voxelized.
    pub points: Vec<usize>,
    pub centroid: [f64; 3],
    /// Mean color, present only when every member point has one.
    pub color: Option<[f64; 3]>,
}

/// Occupied voxels in ascending key order.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    pub origin: [f64; 3],
    pub voxels: Vec<Voxel>,
    /// Voxel index for every input point.
    pub point_voxel: Vec<usize>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn key_of(&self, p: &Point) -> [i64; 3] {
        let xyz = p.xyz();
        std::array::from_fn(|a| ((xyz[a] - self.origin[a]) / self.voxel_size).floor() as i64)
    }

    /// Bounds of voxel `v` as (min, max).
    pub fn extent(&self, v: usize) -> ([f64; 3], [f64; 3]) {
        let k = self.voxels[v].key;
        let lo: [f64; 3] = std::array::from_fn(|a| self.origin[a] + k[a] as f64 * self.voxel_size);
        (lo, lo.map(|x| x + self.voxel_size))
    }
}

/// Buckets points into cubic voxels anchored at the componentwise minimum.
pub fn voxelize(points: &[Point], voxel_size: f64) -> Result<VoxelGrid, GrabCutError> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(GrabCutError::InvalidVoxelSize(voxel_size));
    }
    if points.is_empty() {
        return Err(GrabCutError::EmptyInput);
    }
    let origin: [f64; 3] =
        std::array::from_fn(|a| points.iter().map(|p| p.xyz()[a]).fold(f64::INFINITY, f64::min));
    let mut buckets: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        let xyz = p.xyz();
        let key = std::array::from_fn(|a| ((xyz[a] - origin[a]) / voxel_size).floor() as i64);
        buckets.entry(key).or_default().push(i);
    }
    let mut point_voxel = vec![0; points.len()];
    let voxels = buckets
        .into_iter()
        .enumerate()
        .map(|(v, (key, members))| {
            let n = members.len() as f64;
            let mut centroid = [0.0; 3];
            let mut color = Some([0.0; 3]);
            for &i in &members {
                point_voxel[i] = v;
                let p = &points[i];
                for (c, x) in centroid.iter_mut().zip(p.xyz()) {
                    *c += x;
                }
                color = match (color, p.rgb) {
                    (Some(acc), Some(rgb)) => Some(std::array::from_fn(|a| acc[a] + rgb[a])),
                    _ => None,
                };
            }
            Voxel {
                key,
                points: members,
                centroid: centroid.map(|c| c / n),
                color: color.map(|c| c.map(|x| x / n)),
            }
        })
        .collect();
    Ok(VoxelGrid {
        voxel_size,
        origin,
        voxels,
        point_voxel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_point_single_voxel() {
        let g = voxelize(&[Point::new(3.0, -2.0, 7.5)], 0.1).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.voxels[0].points, vec![0]);
    }

    #[test]
    fn unit_cube_corners_land_in_eight_voxels() {
        let mut pts = Vec::new();
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    pts.push(Point::new(x, y, z));
                }
            }
        }
        let g = voxelize(&pts, 1.0).unwrap();
        assert_eq!(g.len(), 8);
        // floor((1 - 0) / 1) = 1
        assert_eq!(g.key_of(&Point::new(1.0, 1.0, 1.0)), [1, 1, 1]);
        assert!(g.voxels.iter().all(|v| v.points.len() == 1));
    }

    #[test]
    fn random_points_partition_and_centroids_inside() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..1000)
            .map(|_| Point::new(rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0), rng.random_range(5.0..5.5)))
            .collect();
        let g = voxelize(&pts, 0.17).unwrap();
        assert_eq!(g.voxels.iter().map(|v| v.points.len()).sum::<usize>(), 1000);
        for (v, vox) in g.voxels.iter().enumerate() {
            let (lo, hi) = g.extent(v);
            for a in 0..3 {
                assert!(vox.centroid[a] >= lo[a] - 1e-9 && vox.centroid[a] <= hi[a] + 1e-9);
            }
            for &i in &vox.points {
                assert_eq!(g.point_voxel[i], v);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(voxelize(&[Point::new(0.0, 0.0, 0.0)], 0.0), Err(GrabCutError::InvalidVoxelSize(_))));
        assert!(matches!(voxelize(&[], 0.1), Err(GrabCutError::EmptyInput)));
    }

    #[test]
    fn color_is_averaged() {
        let pts = [
            Point::new(0.0, 0.0, 0.0).with_rgb([0.0, 0.0, 1.0]),
            Point::new(0.01, 0.0, 0.0).with_rgb([1.0, 0.0, 1.0]),
        ];
        let g = voxelize(&pts, 1.0).unwrap();
        assert_eq!(g.voxels[0].color, Some([0.5, 0.0, 1.0]));
    }
}
