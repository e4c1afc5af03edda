//! Tri-partition of scene points by their bounding-box membership.

use std::io::Write;

use rayon::prelude::*;

use crate::scene::Scene;
use crate::spatial::BoxGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PointCategory {
    /// Inside exactly one box.
    PotentialForeground,
    /// Inside two or more boxes.
    Ambiguous,
    /// Outside every box.
    Background,
}

impl PointCategory {
    pub fn from_membership(count: usize) -> Self {
        match count {
            0 => Self::Background,
            1 => Self::PotentialForeground,
            _ => Self::Ambiguous,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::PotentialForeground => "foreground",
            Self::Ambiguous => "ambiguous",
            Self::Background => "background",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionMap {
    members: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CategoryCounts {
    pub foreground: usize,
    pub ambiguous: usize,
    pub background: usize,
}

impl PartitionMap {
    /// Builds a map from per-point sorted box index lists.
    pub fn from_members(members: Vec<Vec<usize>>) -> Self {
        Self { members }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn category(&self, i: usize) -> PointCategory {
        PointCategory::from_membership(self.members[i].len())
    }

    /// Indices of the boxes containing point `i`, ascending.
    pub fn member_boxes(&self, i: usize) -> &[usize] {
        &self.members[i]
    }

    /// The box owning a potentially-foreground point.
    pub fn unique_box(&self, i: usize) -> Option<usize> {
        match self.members[i].as_slice() {
            [b] => Some(*b),
            _ => None,
        }
    }

    pub fn categories(&self) -> impl Iterator<Item = PointCategory> + '_ {
        self.members.iter().map(|m| PointCategory::from_membership(m.len()))
    }

    pub fn indices_of(&self, category: PointCategory) -> Vec<usize> {
        self.categories()
            .enumerate()
            .filter(|&(_, c)| c == category)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn counts(&self) -> CategoryCounts {
        let mut c = CategoryCounts::default();
        for cat in self.categories() {
            match cat {
                PointCategory::PotentialForeground => c.foreground += 1,
                PointCategory::Ambiguous => c.ambiguous += 1,
                PointCategory::Background => c.background += 1,
            }
        }
        c
    }

    /// Writes `point_index,category,member_box_indices` rows; member indices
    /// are separated by `;`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "point_index,category,member_box_indices")?;
        for (i, m) in self.members.iter().enumerate() {
            let boxes: Vec<String> = m.iter().map(usize::to_string).collect();
            writeln!(w, "{i},{},{}", self.category(i).as_str(), boxes.join(";"))?;
        }
        w.flush()
    }
}

/// Classifies every point of `scene` by the number of boxes containing it.
pub fn partition_points(scene: &Scene) -> PartitionMap {
    let grid = BoxGrid::new(&scene.boxes);
    let members = scene
        .points
        .par_iter()
        .map(|p| {
            grid.candidates(p)
                .into_iter()
                .filter(|&b| scene.boxes[b].contains(p))
                .collect()
        })
        .collect();
    PartitionMap { members }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{BoundingBox, Point};

    fn scene_with(points: Vec<Point>, boxes: Vec<BoundingBox>) -> Scene {
        let mut s = Scene::empty(4);
        s.points = points;
        s.boxes = boxes;
        s
    }

    #[test]
    fn single_box_point_is_foreground() {
        let s = scene_with(
            vec![Point::new(0.5, 0.5, 0.5)],
            vec![BoundingBox::new([0.0; 3], [1.0; 3], 2).unwrap()],
        );
        let pm = partition_points(&s);
        assert_eq!(pm.category(0), PointCategory::PotentialForeground);
        assert_eq!(pm.unique_box(0), Some(0));
    }

    #[test]
    fn overlap_is_ambiguous() {
        let s = scene_with(
            vec![Point::new(0.9, 0.5, 0.5)],
            vec![
                BoundingBox::new([0.0; 3], [1.0; 3], 2).unwrap(),
                BoundingBox::new([0.8, 0.0, 0.0], [2.0, 1.0, 1.0], 3).unwrap(),
            ],
        );
        let pm = partition_points(&s);
        assert_eq!(pm.category(0), PointCategory::Ambiguous);
        assert_eq!(pm.member_boxes(0), &[0, 1]);
    }

    #[test]
    fn no_boxes_means_all_background() {
        let s = scene_with((0..10).map(|i| Point::new(i as f64, 0.0, 0.0)).collect(), vec![]);
        let pm = partition_points(&s);
        assert_eq!(pm.counts().background, 10);
    }

    #[test]
    fn duplicate_boxes_create_ambiguity() {
        let b = BoundingBox::new([0.0; 3], [1.0; 3], 2).unwrap();
        let s = scene_with(vec![Point::new(0.5, 0.5, 0.5)], vec![b, b]);
        assert_eq!(partition_points(&s).category(0), PointCategory::Ambiguous);
    }

    #[test]
    fn huge_box_goes_to_overflow_and_still_matches() {
        let s = scene_with(
            vec![Point::new(50.0, 50.0, 0.5), Point::new(0.05, 0.05, 0.05)],
            vec![
                BoundingBox::new([0.0; 3], [0.1; 3], 2).unwrap(),
                BoundingBox::new([-100.0; 3], [100.0; 3], 3).unwrap(),
            ],
        );
        let pm = partition_points(&s);
        assert_eq!(pm.member_boxes(0), &[1]);
        assert_eq!(pm.member_boxes(1), &[0, 1]);
    }

    #[test]
    fn csv_output() {
        let s = scene_with(
            vec![Point::new(0.5, 0.5, 0.5), Point::new(5.0, 5.0, 5.0)],
            vec![BoundingBox::new([0.0; 3], [1.0; 3], 2).unwrap()],
        );
        let mut buf = Vec::new();
        partition_points(&s).write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "point_index,category,member_box_indices\n0,foreground,0\n1,background,\n"
        );
    }
}
