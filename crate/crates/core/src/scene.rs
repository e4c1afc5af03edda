//! Scene model: points, boxes, subcloud tags, pseudo labels, and their text formats.
//!
//! Scene files are line oriented:
//!
//! ```text
//! SCENE v1 <num_points> <num_boxes> <num_subclouds> <C>
//! P x y z [r g b]
//! B xmin ymin zmin xmax ymax zmax class
//! S start end tagbits
//! G i class
//! BG c0 c1 ...
//! ```
//!
//! Label files carry one `class confidence` record per point after a
//! `LABELS v1 <num_points>` header, with class 255 marking unlabeled points.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Range;

use thiserror::Error;

/// Class id written for points without a label.
pub const UNLABELED: u8 = 255;

/// Largest supported class count (255 is reserved for [`UNLABELED`]).
pub const MAX_CLASSES: usize = 255;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("line {line}: malformed header: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("line {line}: malformed {record} record: {reason}")]
    MalformedRecord {
        line: usize,
        record: &'static str,
        reason: String,
    },
    #[error("line {line}: non-finite coordinate")]
    NonFiniteCoordinate { line: usize },
    #[error("line {line}: color channel outside [0,1]")]
    ColorOutOfRange { line: usize },
    #[error("line {line}: inverted box extent on axis {axis}")]
    InvertedBox { line: usize, axis: usize },
    #[error("line {line}: class {class} out of range for {classes} classes")]
    ClassOutOfRange {
        line: usize,
        class: usize,
        classes: usize,
    },
    #[error("line {line}: index {index} out of range for {len} points")]
    IndexOutOfRange { line: usize, index: usize, len: usize },
    #[error("line {line}: subcloud range overlaps an earlier subcloud")]
    OverlappingSubclouds { line: usize },
    #[error("line {line}: subcloud tag has no class set")]
    EmptyTag { line: usize },
    #[error("line {line}: background class {class} is also used by a box")]
    BackgroundBoxClass { line: usize, class: usize },
    #[error("expected {expected} {record} records, found {found}")]
    CountMismatch {
        record: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("class count {0} exceeds the supported maximum of 255")]
    TooManyClasses(usize),
    #[error("label map has {found} entries but the scene has {expected} points")]
    LabelLengthMismatch { expected: usize, found: usize },
    #[error("line {line}: confidence {value} outside [0,1]")]
    ConfidenceOutOfRange { line: usize, value: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A 3D point in meters with an optional RGB color in `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rgb: Option<[f64; 3]>,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z, rgb: None }
    }

    pub fn with_rgb(mut self, rgb: [f64; 3]) -> Self {
        self.rgb = Some(rgb);
        self
    }

    #[inline]
    pub fn xyz(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_xyz(p: [f64; 3]) -> Self {
        Self::new(p[0], p[1], p[2])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn translated(&self, d: [f64; 3]) -> Self {
        Self {
            x: self.x + d[0],
            y: self.y + d[1],
            z: self.z + d[2],
            rgb: self.rgb,
        }
    }
}

/// Axis-aligned bounding box annotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub class_id: u8,
}

impl BoundingBox {
    /// Builds a box, rejecting inverted or non-finite extents.
    pub fn new(min: [f64; 3], max: [f64; 3], class_id: u8) -> Result<Self, SceneError> {
        for axis in 0..3 {
            if !min[axis].is_finite() || !max[axis].is_finite() {
                return Err(SceneError::NonFiniteCoordinate { line: 0 });
            }
            if min[axis] > max[axis] {
                return Err(SceneError::InvertedBox { line: 0, axis });
            }
        }
        Ok(Self { min, max, class_id })
    }

    /// Tight box around `points`; `None` when the iterator is empty.
    pub fn enclosing<'a>(points: impl IntoIterator<Item = &'a Point>, class_id: u8) -> Option<Self> {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        let mut any = false;
        for p in points {
            any = true;
            for (axis, v) in p.xyz().into_iter().enumerate() {
                min[axis] = min[axis].min(v);
                max[axis] = max[axis].max(v);
            }
        }
        any.then_some(Self { min, max, class_id })
    }

    #[inline]
    pub fn contains(&self, p: &Point) -> bool {
        point_in_box(p, self)
    }

    pub fn center(&self) -> [f64; 3] {
        std::array::from_fn(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    pub fn size(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.max[a] - self.min[a])
    }

    /// Box with the same center whose extent on every axis is scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let c = self.center();
        let s = self.size();
        Self {
            min: std::array::from_fn(|a| c[a] - 0.5 * s[a] * factor),
            max: std::array::from_fn(|a| c[a] + 0.5 * s[a] * factor),
            class_id: self.class_id,
        }
    }

    /// Grows the box by `margin` meters on every face.
    pub fn dilated(&self, margin: f64) -> Self {
        Self {
            min: self.min.map(|v| v - margin),
            max: self.max.map(|v| v + margin),
            class_id: self.class_id,
        }
    }

    pub fn translated(&self, d: [f64; 3]) -> Self {
        Self {
            min: std::array::from_fn(|a| self.min[a] + d[a]),
            max: std::array::from_fn(|a| self.max[a] + d[a]),
            class_id: self.class_id,
        }
    }
}

/// Inclusive axis-aligned containment test.
#[inline]
pub fn point_in_box(p: &Point, b: &BoundingBox) -> bool {
    p.x >= b.min[0]
        && p.x <= b.max[0]
        && p.y >= b.min[1]
        && p.y <= b.max[1]
        && p.z >= b.min[2]
        && p.z <= b.max[2]
}

/// Class presence vector of a subcloud; at least one class is always set.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SubcloudTag(Vec<bool>);

impl SubcloudTag {
    pub fn new(bits: Vec<bool>) -> Option<Self> {
        bits.iter().any(|&b| b).then_some(Self(bits))
    }

    pub fn from_classes(class_count: usize, classes: impl IntoIterator<Item = u8>) -> Option<Self> {
        let mut bits = vec![false; class_count];
        for c in classes {
            *bits.get_mut(c as usize)? = true;
        }
        Self::new(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.get(class).copied().unwrap_or(false)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b).map(|(c, _)| c)
    }

    pub fn as_targets(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

impl fmt::Display for SubcloudTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subcloud {
    pub range: Range<usize>,
    pub tag: SubcloudTag,
}

/// A labelled scene. Ground truth is optional and only used for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<Point>,
    pub boxes: Vec<BoundingBox>,
    pub subclouds: Vec<Subcloud>,
    pub class_count: usize,
    pub background_classes: BTreeSet<u8>,
    /// Per-point ground-truth class, [`UNLABELED`] where unknown.
    pub ground_truth: Option<Vec<u8>>,
}

impl Scene {
    /// Assembles a scene and checks every invariant.
    pub fn new(
        points: Vec<Point>,
        boxes: Vec<BoundingBox>,
        subclouds: Vec<Subcloud>,
        class_count: usize,
        background_classes: BTreeSet<u8>,
        ground_truth: Option<Vec<u8>>,
    ) -> Result<Self, SceneError> {
        let scene = Self {
            points,
            boxes,
            subclouds,
            class_count,
            background_classes,
            ground_truth,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn empty(class_count: usize) -> Self {
        Self {
            points: Vec::new(),
            boxes: Vec::new(),
            subclouds: Vec::new(),
            class_count,
            background_classes: BTreeSet::new(),
            ground_truth: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.class_count > MAX_CLASSES {
            return Err(SceneError::TooManyClasses(self.class_count));
        }
        let class_err = |class: usize| SceneError::ClassOutOfRange {
            line: 0,
            class,
            classes: self.class_count,
        };
        for p in &self.points {
            if !p.is_finite() {
                return Err(SceneError::NonFiniteCoordinate { line: 0 });
            }
            if let Some(rgb) = p.rgb {
                if rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
                    return Err(SceneError::ColorOutOfRange { line: 0 });
                }
            }
        }
        for b in &self.boxes {
            BoundingBox::new(b.min, b.max, b.class_id)?;
            if b.class_id as usize >= self.class_count {
                return Err(class_err(b.class_id as usize));
            }
            if self.background_classes.contains(&b.class_id) {
                return Err(SceneError::BackgroundBoxClass {
                    line: 0,
                    class: b.class_id as usize,
                });
            }
        }
        for &c in &self.background_classes {
            if c as usize >= self.class_count {
                return Err(class_err(c as usize));
            }
        }
        let mut ranges: Vec<&Range<usize>> = Vec::with_capacity(self.subclouds.len());
        for s in &self.subclouds {
            if s.range.start > s.range.end || s.range.end > self.points.len() {
                return Err(SceneError::IndexOutOfRange {
                    line: 0,
                    index: s.range.end,
                    len: self.points.len(),
                });
            }
            if s.tag.len() != self.class_count {
                return Err(SceneError::MalformedRecord {
                    line: 0,
                    record: "subcloud",
                    reason: format!("tag has {} bits, expected {}", s.tag.len(), self.class_count),
                });
            }
            if ranges
                .iter()
                .any(|r| s.range.start < r.end && r.start < s.range.end)
            {
                return Err(SceneError::OverlappingSubclouds { line: 0 });
            }
            ranges.push(&s.range);
        }
        if let Some(gt) = &self.ground_truth {
            if gt.len() != self.points.len() {
                return Err(SceneError::CountMismatch {
                    record: "ground-truth",
                    expected: self.points.len(),
                    found: gt.len(),
                });
            }
            if let Some(&c) = gt
                .iter()
                .find(|&&c| c != UNLABELED && c as usize >= self.class_count)
            {
                return Err(class_err(c as usize));
            }
        }
        Ok(())
    }

    /// Point index ranges that are processed together: every subcloud, followed
    /// by maximal runs of points that belong to no subcloud.
    pub fn chunks(&self) -> Vec<Chunk> {
        let mut out: Vec<Chunk> = self
            .subclouds
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.range.is_empty())
            .map(|(i, s)| Chunk {
                range: s.range.clone(),
                subcloud: Some(i),
            })
            .collect();
        let mut covered: Vec<Range<usize>> = out.iter().map(|c| c.range.clone()).collect();
        covered.sort_by_key(|r| r.start);
        let mut cursor = 0;
        for r in covered.iter().chain(std::iter::once(&(self.len()..self.len()))) {
            if r.start > cursor {
                out.push(Chunk {
                    range: cursor..r.start,
                    subcloud: None,
                });
            }
            cursor = cursor.max(r.end);
        }
        out
    }

    /// Returns the subcloud index owning each point, if any.
    pub fn subcloud_of_points(&self) -> Vec<Option<usize>> {
        let mut owner = vec![None; self.len()];
        for (i, s) in self.subclouds.iter().enumerate() {
            for o in &mut owner[s.range.clone()] {
                *o = Some(i);
            }
        }
        owner
    }

    /// Rigidly translates every point and box.
    pub fn translated(&self, d: [f64; 3]) -> Self {
        Self {
            points: self.points.iter().map(|p| p.translated(d)).collect(),
            boxes: self.boxes.iter().map(|b| b.translated(d)).collect(),
            ..self.clone()
        }
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self, SceneError> {
        parse_scene(reader)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<(), SceneError> {
        serialize_scene(self, writer)
    }
}

/// A contiguous processing unit of a scene.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub range: Range<usize>,
    pub subcloud: Option<usize>,
}

fn parse_f64(tok: &str, line: usize, record: &'static str) -> Result<f64, SceneError> {
    tok.parse::<f64>().map_err(|_| SceneError::MalformedRecord {
        line,
        record,
        reason: format!("`{tok}` is not a number"),
    })
}

fn parse_usize(tok: &str, line: usize, record: &'static str) -> Result<usize, SceneError> {
    tok.parse::<usize>().map_err(|_| SceneError::MalformedRecord {
        line,
        record,
        reason: format!("`{tok}` is not a non-negative integer"),
    })
}

fn parse_class(tok: &str, line: usize, record: &'static str, classes: usize) -> Result<u8, SceneError> {
    let c = parse_usize(tok, line, record)?;
    if c >= classes {
        return Err(SceneError::ClassOutOfRange {
            line,
            class: c,
            classes,
        });
    }
    Ok(c as u8)
}

fn arity(toks: &[&str], allowed: &[usize], line: usize, record: &'static str) -> Result<(), SceneError> {
    if allowed.contains(&toks.len()) {
        Ok(())
    } else {
        Err(SceneError::MalformedRecord {
            line,
            record,
            reason: format!("unexpected field count {}", toks.len()),
        })
    }
}

/// Parses a scene file, reporting the first offending record.
pub fn parse_scene<R: BufRead>(reader: R) -> Result<Scene, SceneError> {
    let mut lines = reader.lines().enumerate();
    let (n_points, n_boxes, n_subclouds, classes) = loop {
        let Some((i, line)) = lines.next() else {
            return Err(SceneError::MalformedHeader {
                line: 1,
                reason: "missing header".into(),
            });
        };
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let header_err = |reason: &str| SceneError::MalformedHeader {
            line: i + 1,
            reason: reason.to_string(),
        };
        if toks.len() != 6 || toks[0] != "SCENE" || toks[1] != "v1" {
            return Err(header_err("expected `SCENE v1 <points> <boxes> <subclouds> <C>`"));
        }
        let nums: Result<Vec<usize>, _> = toks[2..].iter().map(|t| t.parse::<usize>()).collect();
        let nums = nums.map_err(|_| header_err("counts must be non-negative integers"))?;
        if nums[3] > MAX_CLASSES {
            return Err(SceneError::TooManyClasses(nums[3]));
        }
        break (nums[0], nums[1], nums[2], nums[3]);
    };

    let mut points = Vec::with_capacity(n_points);
    let mut boxes = Vec::with_capacity(n_boxes);
    let mut subclouds: Vec<Subcloud> = Vec::with_capacity(n_subclouds);
    let mut gt_records: Vec<(usize, usize, u8)> = Vec::new();
    let mut background = BTreeSet::new();
    let mut bg_line = 0;

    for (i, line) in lines {
        let line = line?;
        let ln = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        let Some((&kind, rest)) = toks.split_first() else {
            continue;
        };
        match kind {
            "P" => {
                arity(rest, &[3, 6], ln, "point")?;
                let v: Vec<f64> = rest
                    .iter()
                    .map(|t| parse_f64(t, ln, "point"))
                    .collect::<Result<_, _>>()?;
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(SceneError::NonFiniteCoordinate { line: ln });
                }
                let mut p = Point::new(v[0], v[1], v[2]);
                if v.len() == 6 {
                    let rgb = [v[3], v[4], v[5]];
                    if rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
                        return Err(SceneError::ColorOutOfRange { line: ln });
                    }
                    p.rgb = Some(rgb);
                }
                points.push(p);
            }
            "B" => {
                arity(rest, &[7], ln, "box")?;
                let v: Vec<f64> = rest[..6]
                    .iter()
                    .map(|t| parse_f64(t, ln, "box"))
                    .collect::<Result<_, _>>()?;
                let class = parse_class(rest[6], ln, "box", classes)?;
                let b = BoundingBox::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], class).map_err(|e| match e {
                    SceneError::InvertedBox { axis, .. } => SceneError::InvertedBox { line: ln, axis },
                    _ => SceneError::NonFiniteCoordinate { line: ln },
                })?;
                boxes.push((ln, b));
            }
            "S" => {
                arity(rest, &[3], ln, "subcloud")?;
                let start = parse_usize(rest[0], ln, "subcloud")?;
                let end = parse_usize(rest[1], ln, "subcloud")?;
                if start > end {
                    return Err(SceneError::MalformedRecord {
                        line: ln,
                        record: "subcloud",
                        reason: "start exceeds end".into(),
                    });
                }
                if rest[2].len() != classes || !rest[2].bytes().all(|b| b == b'0' || b == b'1') {
                    return Err(SceneError::MalformedRecord {
                        line: ln,
                        record: "subcloud",
                        reason: format!("tag must be a {classes}-character 0/1 string"),
                    });
                }
                let bits = rest[2].bytes().map(|b| b == b'1').collect();
                let tag = SubcloudTag::new(bits).ok_or(SceneError::EmptyTag { line: ln })?;
                if subclouds
                    .iter()
                    .any(|s| start < s.range.end && s.range.start < end)
                {
                    return Err(SceneError::OverlappingSubclouds { line: ln });
                }
                subclouds.push(Subcloud { range: start..end, tag });
                if end > n_points {
                    return Err(SceneError::IndexOutOfRange {
                        line: ln,
                        index: end,
                        len: n_points,
                    });
                }
            }
            "G" => {
                arity(rest, &[2], ln, "ground-truth")?;
                let idx = parse_usize(rest[0], ln, "ground-truth")?;
                let class = parse_class(rest[1], ln, "ground-truth", classes)?;
                if idx >= n_points {
                    return Err(SceneError::IndexOutOfRange {
                        line: ln,
                        index: idx,
                        len: n_points,
                    });
                }
                gt_records.push((ln, idx, class));
            }
            "BG" => {
                bg_line = ln;
                for t in rest {
                    background.insert(parse_class(t, ln, "background", classes)?);
                }
            }
            other => {
                return Err(SceneError::MalformedRecord {
                    line: ln,
                    record: "unknown",
                    reason: format!("unknown record kind `{other}`"),
                })
            }
        }
    }

    if points.len() != n_points {
        return Err(SceneError::CountMismatch {
            record: "point",
            expected: n_points,
            found: points.len(),
        });
    }
    if boxes.len() != n_boxes {
        return Err(SceneError::CountMismatch {
            record: "box",
            expected: n_boxes,
            found: boxes.len(),
        });
    }
    if subclouds.len() != n_subclouds {
        return Err(SceneError::CountMismatch {
            record: "subcloud",
            expected: n_subclouds,
            found: subclouds.len(),
        });
    }
    for (ln, b) in &boxes {
        if background.contains(&b.class_id) {
            return Err(SceneError::BackgroundBoxClass {
                line: (*ln).max(bg_line),
                class: b.class_id as usize,
            });
        }
    }
    let ground_truth = (!gt_records.is_empty()).then(|| {
        let mut gt = vec![UNLABELED; n_points];
        for &(_, i, c) in &gt_records {
            gt[i] = c;
        }
        gt
    });

    Ok(Scene {
        points,
        boxes: boxes.into_iter().map(|(_, b)| b).collect(),
        subclouds,
        class_count: classes,
        background_classes: background,
        ground_truth,
    })
}

/// Writes a scene in the canonical record order. Floats use the shortest
/// representation that parses back to the same value.
pub fn serialize_scene<W: Write>(scene: &Scene, mut w: W) -> Result<(), SceneError> {
    writeln!(
        w,
        "SCENE v1 {} {} {} {}",
        scene.points.len(),
        scene.boxes.len(),
        scene.subclouds.len(),
        scene.class_count
    )?;
    if !scene.background_classes.is_empty() {
        write!(w, "BG")?;
        for c in &scene.background_classes {
            write!(w, " {c}")?;
        }
        writeln!(w)?;
    }
    for p in &scene.points {
        match p.rgb {
            Some([r, g, b]) => writeln!(w, "P {} {} {} {} {} {}", p.x, p.y, p.z, r, g, b)?,
            None => writeln!(w, "P {} {} {}", p.x, p.y, p.z)?,
        }
    }
    for b in &scene.boxes {
        writeln!(
            w,
            "B {} {} {} {} {} {} {}",
            b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2], b.class_id
        )?;
    }
    for s in &scene.subclouds {
        writeln!(w, "S {} {} {}", s.range.start, s.range.end, s.tag)?;
    }
    if let Some(gt) = &scene.ground_truth {
        for (i, &c) in gt.iter().enumerate() {
            if c != UNLABELED {
                writeln!(w, "G {i} {c}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Which stage produced a pseudo label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Provenance {
    BoxPrior,
    GrabCut,
    AstPseudoLabel,
    Pcam,
    RefinedPcam,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BoxPrior => "BoxPrior",
            Self::GrabCut => "GrabCut",
            Self::AstPseudoLabel => "AST-PL",
            Self::Pcam => "PCAM",
            Self::RefinedPcam => "Refined-PCAM",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub class_id: u8,
    pub confidence: f64,
    pub provenance: Provenance,
}

impl PseudoLabel {
    pub fn new(class_id: u8, confidence: f64, provenance: Provenance) -> Self {
        debug_assert!(class_id != UNLABELED);
        debug_assert!((0.0..=1.0).contains(&confidence));
        Self {
            class_id,
            confidence,
            provenance,
        }
    }
}

/// Per-point optional pseudo labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelMap {
    labels: Vec<Option<PseudoLabel>>,
}

impl PseudoLabelMap {
    pub fn unlabeled(len: usize) -> Self {
        Self {
            labels: vec![None; len],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&PseudoLabel> {
        self.labels[i].as_ref()
    }

    pub fn set(&mut self, i: usize, label: PseudoLabel) {
        self.labels[i] = Some(label);
    }

    pub fn clear(&mut self, i: usize) {
        self.labels[i] = None;
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&PseudoLabel>> + '_ {
        self.labels.iter().map(Option::as_ref)
    }

    pub fn labeled(&self) -> impl Iterator<Item = (usize, &PseudoLabel)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.as_ref().map(|l| (i, l)))
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// Class per point, with [`UNLABELED`] where no label exists.
    pub fn classes(&self) -> Vec<u8> {
        self.labels
            .iter()
            .map(|l| l.map_or(UNLABELED, |l| l.class_id))
            .collect()
    }

    /// Copies every label of `other` into `self`, overwriting existing entries.
    pub fn merge_from(&mut self, other: &PseudoLabelMap) {
        for (i, l) in other.labeled() {
            self.labels[i] = Some(*l);
        }
    }
}

impl FromIterator<Option<PseudoLabel>> for PseudoLabelMap {
    fn from_iter<T: IntoIterator<Item = Option<PseudoLabel>>>(iter: T) -> Self {
        Self {
            labels: iter.into_iter().collect(),
        }
    }
}

/// Writes `labels` in the label format, checking the expected point count.
pub fn serialize_labels<W: Write>(labels: &PseudoLabelMap, expected_points: usize, w: W) -> Result<(), SceneError> {
    if labels.len() != expected_points {
        return Err(SceneError::LabelLengthMismatch {
            expected: expected_points,
            found: labels.len(),
        });
    }
    write_label_records(labels.iter().map(|l| l.map(|l| (l.class_id, l.confidence))), labels.len(), w)
}

/// Low-level label writer over `(class, confidence)` records.
pub fn write_label_records<W: Write>(
    records: impl IntoIterator<Item = Option<(u8, f64)>>,
    len: usize,
    mut w: W,
) -> Result<(), SceneError> {
    writeln!(w, "LABELS v1 {len}")?;
    let mut written = 0;
    for r in records {
        match r {
            Some((c, conf)) => writeln!(w, "{c} {conf}")?,
            None => writeln!(w, "{UNLABELED} 0")?,
        }
        written += 1;
    }
    if written != len {
        return Err(SceneError::LabelLengthMismatch {
            expected: len,
            found: written,
        });
    }
    w.flush()?;
    Ok(())
}

/// Reads a label file. The format does not store provenance, so the caller
/// supplies the one to attach to every labeled record.
pub fn parse_labels<R: BufRead>(reader: R, provenance: Provenance) -> Result<PseudoLabelMap, SceneError> {
    let mut lines = reader.lines().enumerate();
    let n = loop {
        let Some((i, line)) = lines.next() else {
            return Err(SceneError::MalformedHeader {
                line: 1,
                reason: "missing header".into(),
            });
        };
        let line = line?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 3 || toks[0] != "LABELS" || toks[1] != "v1" {
            return Err(SceneError::MalformedHeader {
                line: i + 1,
                reason: "expected `LABELS v1 <num_points>`".into(),
            });
        }
        break toks[2].parse::<usize>().map_err(|_| SceneError::MalformedHeader {
            line: i + 1,
            reason: "point count must be a non-negative integer".into(),
        })?;
    };
    let mut labels = Vec::with_capacity(n);
    for (i, line) in lines {
        let line = line?;
        let ln = i + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        arity(&toks, &[2], ln, "label")?;
        let class = parse_usize(toks[0], ln, "label")?;
        let conf = parse_f64(toks[1], ln, "label")?;
        if class == UNLABELED as usize {
            labels.push(None);
            continue;
        }
        if class > UNLABELED as usize {
            return Err(SceneError::ClassOutOfRange {
                line: ln,
                class,
                classes: MAX_CLASSES,
            });
        }
        if !(0.0..=1.0).contains(&conf) {
            return Err(SceneError::ConfidenceOutOfRange { line: ln, value: conf });
        }
        labels.push(Some(PseudoLabel::new(class as u8, conf, provenance)));
    }
    if labels.len() != n {
        return Err(SceneError::CountMismatch {
            record: "label",
            expected: n,
            found: labels.len(),
        });
    }
    Ok(PseudoLabelMap { labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box() -> BoundingBox {
        BoundingBox::new([0.0; 3], [1.0; 3], 2).unwrap()
    }

    #[test]
    fn box_center_is_inside() {
        assert!(point_in_box(&Point::new(0.5, 0.5, 0.5), &unit_box()));
    }

    #[test]
    fn box_faces_are_inclusive() {
        assert!(point_in_box(&Point::new(1.0, 0.5, 0.5), &unit_box()));
        assert!(point_in_box(&Point::new(0.0, 0.0, 0.0), &unit_box()));
    }

    #[test]
    fn just_outside_max_corner() {
        assert!(!point_in_box(&Point::new(1.0 + 1e-12, 1.0, 1.0), &unit_box()));
    }

    #[test]
    fn empty_scene_parses() {
        let s = parse_scene("SCENE v1 0 0 0 2\n".as_bytes()).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.class_count, 2);
        s.validate().unwrap();
    }

    #[test]
    fn small_scene_round_trip() {
        let scene = Scene::new(
            vec![
                Point::new(0.1, 0.2, 0.3),
                Point::new(-1.5, 2.0, 1e-7).with_rgb([0.0, 0.5, 1.0]),
                Point::new(3.0, 3.0, 3.0),
            ],
            vec![BoundingBox::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 2).unwrap()],
            vec![Subcloud {
                range: 0..3,
                tag: SubcloudTag::from_classes(3, [0, 2]).unwrap(),
            }],
            3,
            [0u8].into_iter().collect(),
            Some(vec![2, 0, UNLABELED]),
        )
        .unwrap();
        let mut buf = Vec::new();
        scene.write(&mut buf).unwrap();
        let back = parse_scene(buf.as_slice()).unwrap();
        assert_eq!(back, scene);
    }

    #[test]
    fn inverted_box_is_rejected() {
        let text = "SCENE v1 0 1 0 3\nB 0 2 0 1 1 1 1\n";
        let err = parse_scene(text.as_bytes()).unwrap_err();
        assert!(matches!(err, SceneError::InvertedBox { line: 2, axis: 1 }));
        assert!(err.to_string().contains("inverted box extent"));
    }

    #[test]
    fn parse_errors_are_distinct() {
        let nan = parse_scene("SCENE v1 1 0 0 2\nP 0 NaN 0\n".as_bytes()).unwrap_err();
        assert!(matches!(nan, SceneError::NonFiniteCoordinate { line: 2 }));

        let oob = parse_scene("SCENE v1 1 0 1 2\nP 0 0 0\nS 0 4 11\n".as_bytes()).unwrap_err();
        assert!(matches!(oob, SceneError::IndexOutOfRange { line: 3, .. }));

        let overlap =
            parse_scene("SCENE v1 4 0 2 2\nP 0 0 0\nP 0 0 0\nP 0 0 0\nP 0 0 0\nS 0 3 10\nS 2 4 01\n".as_bytes())
                .unwrap_err();
        assert!(matches!(overlap, SceneError::OverlappingSubclouds { line: 7 }));

        let header = parse_scene("SCENE v2 0 0 0 2\n".as_bytes()).unwrap_err();
        assert!(matches!(header, SceneError::MalformedHeader { line: 1, .. }));

        let empty_tag = parse_scene("SCENE v1 1 0 1 2\nP 0 0 0\nS 0 1 00\n".as_bytes()).unwrap_err();
        assert!(matches!(empty_tag, SceneError::EmptyTag { line: 3 }));

        let count = parse_scene("SCENE v1 2 0 0 2\nP 0 0 0\n".as_bytes()).unwrap_err();
        assert!(matches!(count, SceneError::CountMismatch { record: "point", .. }));
    }

    #[test]
    fn background_class_on_box_is_rejected() {
        let text = "SCENE v1 0 1 0 3\nBG 0\nB 0 0 0 1 1 1 0\n";
        assert!(matches!(
            parse_scene(text.as_bytes()).unwrap_err(),
            SceneError::BackgroundBoxClass { class: 0, .. }
        ));
    }

    #[test]
    fn unlabeled_map_writes_sentinels() {
        let mut buf = Vec::new();
        serialize_labels(&PseudoLabelMap::unlabeled(4), 4, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "LABELS v1 4\n255 0\n255 0\n255 0\n255 0\n");
    }

    #[test]
    fn labeled_record_and_round_trip() {
        let mut map = PseudoLabelMap::unlabeled(2);
        map.set(0, PseudoLabel::new(3, 1.0, Provenance::BoxPrior));
        let mut buf = Vec::new();
        serialize_labels(&map, 2, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().nth(1), Some("3 1"));
        let back = parse_labels(buf.as_slice(), Provenance::BoxPrior).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn label_length_mismatch() {
        let err = serialize_labels(&PseudoLabelMap::unlabeled(3), 4, Vec::new()).unwrap_err();
        assert!(matches!(err, SceneError::LabelLengthMismatch { expected: 4, found: 3 }));
    }

    #[test]
    fn chunks_cover_uncovered_points() {
        let mut scene = Scene::empty(2);
        scene.points = vec![Point::new(0.0, 0.0, 0.0); 6];
        scene.subclouds = vec![Subcloud {
            range: 2..4,
            tag: SubcloudTag::from_classes(2, [1]).unwrap(),
        }];
        let chunks = scene.chunks();
        let ranges: Vec<_> = chunks.iter().map(|c| c.range.clone()).collect();
        assert_eq!(ranges, vec![2..4, 0..2, 4..6]);
        assert_eq!(chunks[0].subcloud, Some(0));
    }
}
