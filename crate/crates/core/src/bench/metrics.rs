//! Confusion matrices, IoU and pseudo-label quality.

use std::collections::BTreeMap;

use serde::Serialize;

use super::BenchError;
use crate::partition::PartitionMap;
use crate::scene::{PseudoLabelMap, UNLABELED};

/// Rows are ground truth, columns prediction. Unlabeled predictions are
/// counted per ground-truth class in `unlabeled`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
    pub unlabeled: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes]; classes],
            unlabeled: vec![0; classes],
        }
    }

    /// Accumulates `(gt, pred)` pairs; points without ground truth are skipped.
    pub fn from_labels(gt: &[u8], pred: &[u8], classes: usize) -> Result<Self, BenchError> {
        if gt.len() != pred.len() {
            return Err(BenchError::LengthMismatch {
                expected: gt.len(),
                found: pred.len(),
            });
        }
        let mut cm = Self::new(classes);
        for (&g, &p) in gt.iter().zip(pred) {
            cm.add(g, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, gt: u8, pred: u8) -> Result<(), BenchError> {
        if gt == UNLABELED {
            return Ok(());
        }
        let (g, p) = (gt as usize, pred as usize);
        if g >= self.classes || (pred != UNLABELED && p >= self.classes) {
            return Err(BenchError::ClassOutOfRange {
                class: g.max(if pred == UNLABELED { 0 } else { p }),
                classes: self.classes,
            });
        }
        if pred == UNLABELED {
            self.unlabeled[g] += 1;
        } else {
            self.counts[g][p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.unlabeled.iter().sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouReport {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Per-class IoU and their mean over the classes present in the ground truth.
/// Classes that are only predicted still get an IoU (of zero) in `per_class`.
pub fn miou(cm: &ConfusionMatrix) -> Result<IouReport, BenchError> {
    if cm.total() == 0 {
        return Err(BenchError::EmptyMatrix);
    }
    let c = cm.classes;
    let mut per_class = Vec::with_capacity(c);
    let mut present = Vec::new();
    for k in 0..c {
        let tp = cm.counts[k][k];
        let fn_ = cm.counts[k].iter().sum::<u64>() - tp + cm.unlabeled[k];
        let fp = (0..c).map(|g| cm.counts[g][k]).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        let iou = (denom > 0).then(|| tp as f64 / denom as f64);
        if tp + fn_ > 0 {
            present.push(iou.unwrap_or(0.0));
        }
        per_class.push(iou);
    }
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(IouReport { per_class, miou })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct QualityStats {
    pub total: usize,
    pub labeled: usize,
    pub correct: usize,
    /// Correct over labeled points.
    pub precision: f64,
    /// Correct over all evaluated points.
    pub recall: f64,
    /// Point accuracy of the emitted labels; equal to precision.
    pub accuracy: f64,
    pub labeled_fraction: f64,
}

impl QualityStats {
    fn finish(mut self) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        self.precision = ratio(self.correct, self.labeled);
        self.recall = ratio(self.correct, self.total);
        self.accuracy = self.precision;
        self.labeled_fraction = ratio(self.labeled, self.total);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelQuality {
    pub overall: QualityStats,
    /// Keyed by partition category name when a partition is given.
    pub per_category: BTreeMap<String, QualityStats>,
}

/// Compares pseudo labels with ground truth over points that have ground truth.
pub fn label_quality(
    pseudo: &PseudoLabelMap,
    gt: &[u8],
    partition: Option<&PartitionMap>,
) -> Result<LabelQuality, BenchError> {
    if pseudo.len() != gt.len() {
        return Err(BenchError::LengthMismatch {
            expected: gt.len(),
            found: pseudo.len(),
        });
    }
    let mut overall = QualityStats::default();
    let mut per_category: BTreeMap<String, QualityStats> = BTreeMap::new();
    for (i, (&g, l)) in gt.iter().zip(pseudo.iter()).enumerate() {
        if g == UNLABELED {
            continue;
        }
        let bump = |s: &mut QualityStats| {
            s.total += 1;
            if let Some(l) = l {
                s.labeled += 1;
                if l.class_id == g {
                    s.correct += 1;
                }
            }
        };
        bump(&mut overall);
        if let Some(p) = partition {
            bump(per_category.entry(p.category(i).as_str().to_string()).or_default());
        }
    }
    Ok(LabelQuality {
        overall: overall.finish(),
        per_category: per_category.into_iter().map(|(k, v)| (k, v.finish())).collect(),
    })
}
