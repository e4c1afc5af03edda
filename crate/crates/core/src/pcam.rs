//! Background pseudo labels from a subcloud-tag classifier.
//!
//! The classifier is trained on subcloud tags only. Its head applied to the
//! pre-pooling per-point features gives a class activation per point, masked
//! by the tag of the point's subcloud; background points take the strongest
//! allowed class.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::net::train::{batch_input, split_batches};
use crate::net::{sigmoid_ce_with_grad, Dense, LossGrad, NetError, PointNetLite, TrainConfig};
use crate::partition::{PartitionMap, PointCategory};
use crate::scene::{Provenance, PseudoLabel, Scene, SubcloudTag};

#[derive(Debug, Error)]
pub enum PcamError {
    #[error("point {0} is not a background point")]
    NotBackground(usize),
    #[error("scene has no tagged subclouds")]
    NoSubclouds,
    #[error("feature matrix has {found} rows, scene has {expected} points")]
    FeatureRows { expected: usize, found: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Per-epoch mean classifier loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Trains the tag classifier with sigmoid cross-entropy, one SGD step per
/// subcloud batch.
pub fn train_classifier(
    scene: &Scene,
    features: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<(PointNetLite, TrainLog), PcamError> {
    cfg.validate()?;
    if features.nrows() != scene.len() {
        return Err(PcamError::FeatureRows {
            expected: scene.len(),
            found: features.nrows(),
        });
    }
    let tagged: Vec<usize> = (0..scene.subclouds.len())
        .filter(|&i| !scene.subclouds[i].range.is_empty())
        .collect();
    if tagged.is_empty() {
        return Err(PcamError::NoSubclouds);
    }
    let mut net = PointNetLite::new(cfg.net_config(scene.class_count), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c1a5);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut steps = Vec::new();
        for &s in &tagged {
            let range: Vec<usize> = scene.subclouds[s].range.clone().collect();
            for b in split_batches(&range, cfg.batch_size, &mut rng) {
                steps.push((s, b));
            }
        }
        steps.shuffle(&mut rng);
        let mut total = 0.0;
        for (s, batch) in &steps {
            let input = batch_input(features, &scene.points, batch, net.config.context_k);
            let pass = net.forward(&input)?;
            let (loss, grad) = sigmoid_ce_with_grad(pass.class_logits.view(), &scene.subclouds[*s].tag);
            total += loss;
            let g = net.backward(
                &input,
                &pass,
                &LossGrad {
                    seg_logits: None,
                    class_logits: Some(grad),
                },
            )?;
            net.sgd_step(&g, lr);
        }
        log.epoch_loss.push(total / steps.len() as f64);
    }
    Ok((net, log))
}

/// Tag prediction of a trained classifier on a set of points: classes whose
/// pooled logit is positive.
pub fn predict_tag(net: &PointNetLite, features: &Array2<f64>, scene: &Scene, indices: &[usize]) -> Result<Vec<bool>, PcamError> {
    let input = batch_input(features, &scene.points, indices, net.config.context_k);
    let pass = net.forward(&input)?;
    Ok(pass.class_logits.iter().map(|&z| z > 0.0).collect())
}

/// `M_c = (w_c · f + b_c) · y_c` for every class.
pub fn class_activations(head: &Dense, f_cam: ArrayView1<f64>, tag: &SubcloudTag) -> Vec<f64> {
    let raw = f_cam.dot(&head.weight) + &head.bias;
    raw.iter()
        .enumerate()
        .map(|(c, &m)| if tag.contains(c) { m } else { 0.0 })
        .collect()
}

/// Arg-max over `candidates` (ties to the lowest class) and the softmax
/// probability of that class among the tagged classes `tagged`.
pub fn label_from_activations(m: &[f64], candidates: &[usize], tagged: &[usize]) -> (usize, f64) {
    let mut best = candidates[0];
    for &c in &candidates[1..] {
        if m[c] > m[best] {
            best = c;
        }
    }
    let top = tagged.iter().map(|&c| m[c]).fold(m[best], f64::max);
    let denom: f64 = tagged.iter().map(|&c| (m[c] - top).exp()).sum();
    (best, (m[best] - top).exp() / denom)
}

/// Candidate classes for background points of a subcloud.
pub fn candidate_classes(tag: &SubcloudTag, background: &BTreeSet<u8>, restrict: bool) -> Vec<usize> {
    let tagged: Vec<usize> = tag.classes().collect();
    if restrict && !background.is_empty() {
        let bg: Vec<usize> = tagged
            .iter()
            .copied()
            .filter(|&c| background.contains(&(c as u8)))
            .collect();
        if !bg.is_empty() {
            return bg;
        }
    }
    tagged
}

/// Activations and derived labels for a set of background points.
#[derive(Debug, Clone, PartialEq)]
pub struct PcamField {
    pub points: Vec<usize>,
    /// Masked activations, one row per entry of `points`.
    pub activations: Array2<f64>,
    pub labels: Vec<u8>,
    pub confidence: Vec<f64>,
}

impl PcamField {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Evaluates per-point `f_cam` for every point of each tagged subcloud in
/// deterministic batches matching the training batch size.
fn subcloud_features(
    net: &PointNetLite,
    features: &Array2<f64>,
    scene: &Scene,
    subcloud: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<(usize, ndarray::Array1<f64>)>, PcamError> {
    let range: Vec<usize> = scene.subclouds[subcloud].range.clone().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ subcloud as u64);
    let mut out = Vec::with_capacity(range.len());
    for batch in split_batches(&range, batch_size, &mut rng) {
        let pass = net.forward(&batch_input(features, &scene.points, &batch, net.config.context_k))?;
        for (k, &i) in batch.iter().enumerate() {
            out.push((i, pass.f_cam.row(k).to_owned()));
        }
    }
    out.sort_by_key(|(i, _)| *i);
    Ok(out)
}

/// Computes the activation field for `points`, which must all be background.
/// Points outside every tagged subcloud are skipped.
pub fn compute_pcam_for(
    net: &PointNetLite,
    scene: &Scene,
    features: &Array2<f64>,
    partition: &PartitionMap,
    points: &[usize],
    cfg: &TrainConfig,
) -> Result<PcamField, PcamError> {
    if let Some(&p) = points
        .iter()
        .find(|&&p| partition.category(p) != PointCategory::Background)
    {
        return Err(PcamError::NotBackground(p));
    }
    let wanted: BTreeSet<usize> = points.iter().copied().collect();
    let owner = scene.subcloud_of_points();
    let c = scene.class_count;
    let mut rows: Vec<(usize, Vec<f64>, u8, f64)> = Vec::new();
    for s in 0..scene.subclouds.len() {
        let sub = &scene.subclouds[s];
        if !sub.range.clone().any(|i| wanted.contains(&i)) {
            continue;
        }
        let cands = candidate_classes(&sub.tag, &scene.background_classes, cfg.restrict_bg_classes);
        let tagged: Vec<usize> = sub.tag.classes().collect();
        for (i, f) in subcloud_features(net, features, scene, s, cfg.batch_size, cfg.seed)? {
            if !wanted.contains(&i) || owner[i] != Some(s) {
                continue;
            }
            let m = class_activations(&net.class_head, f.view(), &sub.tag);
            let (label, conf) = label_from_activations(&m, &cands, &tagged);
            rows.push((i, m, label as u8, conf));
        }
    }
    rows.sort_by_key(|r| r.0);
    let mut activations = Array2::zeros((rows.len(), c));
    for (k, r) in rows.iter().enumerate() {
        activations.row_mut(k).assign(&ArrayView1::from(&r.1[..]));
    }
    Ok(PcamField {
        points: rows.iter().map(|r| r.0).collect(),
        activations,
        labels: rows.iter().map(|r| r.2).collect(),
        confidence: rows.iter().map(|r| r.3).collect(),
    })
}

/// Activation field over every background point of the scene.
pub fn compute_pcam(
    net: &PointNetLite,
    scene: &Scene,
    features: &Array2<f64>,
    partition: &PartitionMap,
    cfg: &TrainConfig,
) -> Result<PcamField, PcamError> {
    let bg = partition.indices_of(PointCategory::Background);
    compute_pcam_for(net, scene, features, partition, &bg, cfg)
}

/// One entry per field point, provenance PCAM.
pub fn background_pseudo_labels(field: &PcamField) -> Vec<(usize, PseudoLabel)> {
    field
        .points
        .iter()
        .zip(&field.labels)
        .zip(&field.confidence)
        .map(|((&i, &l), &c)| (i, PseudoLabel::new(l, c.clamp(0.0, 1.0), Provenance::Pcam)))
        .collect()
}

/// Number of entries kept out of `n` for a given fraction.
pub fn kept_count(n: usize, fraction: f64) -> usize {
    // slack absorbs products such as 0.2 * 15 = 3.0000000000000004
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Keeps the `ceil(fraction · n)` most confident entries, ties broken toward
/// the lower point index, relabelled as Refined-PCAM. Output is sorted by point.
pub fn refine_top_fraction(entries: &[(usize, PseudoLabel)], fraction: f64) -> Vec<(usize, PseudoLabel)> {
    let keep = kept_count(entries.len(), fraction);
    let mut order: Vec<&(usize, PseudoLabel)> = entries.iter().collect();
    order.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence).then(a.0.cmp(&b.0)));
    let mut kept: Vec<(usize, PseudoLabel)> = order[..keep]
        .iter()
        .map(|(i, l)| {
            (
                *i,
                PseudoLabel {
                    provenance: Provenance::RefinedPcam,
                    ..*l
                },
            )
        })
        .collect();
    kept.sort_by_key(|e| e.0);
    kept
}

/// Mean activation per class over a field, useful for diagnostics.
pub fn mean_activation(field: &PcamField) -> Option<ndarray::Array1<f64>> {
    field.activations.mean_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn entry(i: usize, conf: f64) -> (usize, PseudoLabel) {
        (i, PseudoLabel::new(0, conf, Provenance::Pcam))
    }

    #[test]
    fn hand_activation() {
        let head = Dense {
            weight: array![[1.0], [2.0]],
            bias: array![0.0],
        };
        let tag = SubcloudTag::new(vec![true]).unwrap();
        assert_eq!(class_activations(&head, array![3.0, 4.0].view(), &tag), vec![11.0]);
    }

    #[test]
    fn masking_zeroes_untagged_classes() {
        let head = Dense {
            weight: array![[1.0, -2.0, 3.0]],
            bias: array![0.5, 0.5, 0.5],
        };
        let tag = SubcloudTag::new(vec![false, true, false]).unwrap();
        let m = class_activations(&head, array![2.0].view(), &tag);
        assert_eq!(m, vec![0.0, -3.5, 0.0]);
        // single-class tag forces that class even if its activation is negative
        assert_eq!(label_from_activations(&m, &[1], &[1]), (1, 1.0));
    }

    #[test]
    fn argmax_and_ties() {
        assert_eq!(label_from_activations(&[0.1, 0.9, 0.0], &[0, 1, 2], &[0, 1, 2]).0, 1);
        let (c, conf) = label_from_activations(&[0.5, 0.5, 0.0], &[0, 1, 2], &[0, 1, 2]);
        assert_eq!(c, 0);
        assert!(conf < 0.5);
        // restricted arg-max, confidence over every tagged class
        let (c, conf) = label_from_activations(&[3.0, 1.0, 1.0], &[1, 2], &[0, 1, 2]);
        assert_eq!(c, 1);
        let expect = 1.0 / (3.0f64.exp() + 2.0 * 1.0f64.exp()) * 1.0f64.exp();
        assert!((conf - expect).abs() < 1e-12);
    }

    #[test]
    fn refine_counts() {
        let e: Vec<_> = (0..10).map(|i| entry(i, i as f64 / 10.0)).collect();
        let kept = refine_top_fraction(&e, 0.2);
        assert_eq!(kept.iter().map(|k| k.0).collect::<Vec<_>>(), vec![8, 9]);
        assert!(kept.iter().all(|k| k.1.provenance == Provenance::RefinedPcam));
        assert_eq!(refine_top_fraction(&e, 1.0).len(), 10);
        let flat: Vec<_> = (0..5).map(|i| entry(i, 0.7)).collect();
        assert_eq!(refine_top_fraction(&flat, 0.2).iter().map(|k| k.0).collect::<Vec<_>>(), vec![0]);
        assert_eq!(kept_count(15, 0.2), 3);
        assert_eq!(kept_count(11, 0.2), 3);
        assert_eq!(kept_count(0, 0.2), 0);
    }

    #[test]
    fn candidates_respect_restriction() {
        let tag = SubcloudTag::new(vec![true, true, false, true]).unwrap();
        let bg: BTreeSet<u8> = [2, 3].into_iter().collect();
        assert_eq!(candidate_classes(&tag, &bg, true), vec![3]);
        assert_eq!(candidate_classes(&tag, &bg, false), vec![0, 1, 3]);
        let none: BTreeSet<u8> = [2].into_iter().collect();
        assert_eq!(candidate_classes(&tag, &none, true), vec![0, 1, 3]);
    }
}
