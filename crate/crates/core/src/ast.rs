//! Attention-based self-training of the segmentation network.
//!
//! Unique-box points contribute an attention-weighted cross-entropy against
//! their box class; ambiguous points receive pseudo labels from the network's
//! own predictions when one of their candidate classes is confident enough.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::compute_features;
use crate::net::loss::log_softmax_row;
use crate::net::train::{batch_input, split_batches};
use crate::net::{cross_entropy, sigmoid, LossGrad, NetError, PointNetLite, TrainConfig};
use crate::partition::{PartitionMap, PointCategory};
use crate::scene::{Provenance, PseudoLabel, PseudoLabelMap, Scene};

const LOG_FLOOR: f64 = -27.631_021_115_928_547; // ln(1e-12)

#[derive(Debug, Error)]
pub enum AstError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no labeled points to train on")]
    NoLabels,
    #[error("label map has {found} entries, scene has {expected} points")]
    LabelLength { expected: usize, found: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// `−(1/N) Σ_p S_b(p) · log Y_b(p)` where `b` is the box class of row `p`.
pub fn attention_loss(s: ArrayView2<f64>, y: ArrayView2<f64>, box_class: &[usize]) -> Result<f64, AstError> {
    if s.dim() != y.dim() {
        return Err(AstError::Shape(format!("S is {:?}, Y is {:?}", s.dim(), y.dim())));
    }
    if box_class.len() != s.nrows() {
        return Err(AstError::Shape(format!(
            "{} box classes for {} rows",
            box_class.len(),
            s.nrows()
        )));
    }
    if let Some(&b) = box_class.iter().find(|&&b| b >= s.ncols()) {
        return Err(AstError::Shape(format!("box class {b} outside {} classes", s.ncols())));
    }
    if box_class.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = box_class
        .iter()
        .enumerate()
        .map(|(p, &b)| s[[p, b]] * y[[p, b]].max(1e-12).ln())
        .sum();
    Ok(-sum / box_class.len() as f64)
}

/// Attention loss over rows `rows` of the logits `z`, and its gradient with
/// respect to all of `z`. With `stop_grad` the attention map is treated as a
/// constant.
pub fn attention_loss_with_grad(
    z: &Array2<f64>,
    rows: &[(usize, usize)],
    stop_grad: bool,
) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(z.raw_dim());
    if rows.is_empty() {
        return (0.0, grad);
    }
    let inv = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    for &(p, b) in rows {
        let logy = log_softmax_row(z.row(p));
        let s = sigmoid(z[[p, b]]);
        let clamped = logy[b] < LOG_FLOOR;
        let lb = logy[b].max(LOG_FLOOR);
        loss -= inv * s * lb;
        let mut g = grad.row_mut(p);
        if !stop_grad {
            g[b] -= inv * s * (1.0 - s) * lb;
        }
        if !clamped {
            for (j, lj) in logy.iter().enumerate() {
                let delta = if j == b { 1.0 } else { 0.0 };
                g[j] -= inv * s * (delta - lj.exp());
            }
        }
    }
    (loss, grad)
}

/// `L_CE + α·L_A`.
pub fn combined_loss(l_ce: f64, l_a: f64, alpha: f64) -> f64 {
    l_ce + alpha * l_a
}

/// Pseudo label for each row of `y`: the most probable candidate class with
/// its probability renormalized over the candidates, kept only when that
/// confidence reaches `tau`.
pub fn pseudo_label_ambiguous(y: ArrayView2<f64>, candidates: &[Vec<usize>], tau: f64) -> Vec<Option<(usize, f64)>> {
    candidates
        .iter()
        .enumerate()
        .map(|(p, cands)| {
            let first = *cands.first()?;
            let mut best = first;
            for &c in &cands[1..] {
                if y[[p, c]] > y[[p, best]] {
                    best = c;
                }
            }
            let total: f64 = cands.iter().map(|&c| y[[p, c]]).sum();
            let conf = if total > 0.0 { y[[p, best]] / total } else { 1.0 / cands.len() as f64 };
            (conf >= tau).then_some((best, conf))
        })
        .collect()
}

/// Class ids of the boxes containing point `i`, sorted and deduplicated.
pub fn candidate_classes(scene: &Scene, partition: &PartitionMap, i: usize) -> Vec<usize> {
    let mut c: Vec<usize> = partition
        .member_boxes(i)
        .iter()
        .map(|&b| scene.boxes[b].class_id as usize)
        .collect();
    c.sort_unstable();
    c.dedup();
    c
}

/// Box-class labels for every unique-box point.
pub fn box_prior_labels(scene: &Scene, partition: &PartitionMap) -> PseudoLabelMap {
    (0..scene.len())
        .map(|i| {
            partition
                .unique_box(i)
                .map(|b| PseudoLabel::new(scene.boxes[b].class_id, 1.0, Provenance::BoxPrior))
        })
        .collect()
}

/// Class probabilities for `points` using deterministic batches of each chunk.
pub fn predict_probs_for(
    net: &PointNetLite,
    scene: &Scene,
    features: &Array2<f64>,
    points: Option<&[bool]>,
    batch_size: usize,
    seed: u64,
) -> Result<Array2<f64>, AstError> {
    let mut out = Array2::from_elem((scene.len(), net.config.classes), f64::NAN);
    for (k, chunk) in scene.chunks().into_iter().enumerate() {
        if let Some(mask) = points {
            if !chunk.range.clone().any(|i| mask[i]) {
                continue;
            }
        }
        let idx: Vec<usize> = chunk.range.collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9e37_79b9));
        for batch in split_batches(&idx, batch_size, &mut rng) {
            let pass = net.forward(&batch_input(features, &scene.points, &batch, net.config.context_k))?;
            for (r, &i) in batch.iter().enumerate() {
                out.row_mut(i).assign(&pass.probs.row(r));
            }
        }
    }
    Ok(out)
}

/// Arg-max class per point (ties to the lowest index).
pub fn predict(net: &PointNetLite, scene: &Scene, features: &Array2<f64>, cfg: &TrainConfig) -> Result<Vec<u8>, AstError> {
    let probs = predict_probs_for(net, scene, features, None, cfg.batch_size, cfg.seed)?;
    Ok(probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// Computes features with the configured mode and predicts every point.
pub fn predict_scene(net: &PointNetLite, scene: &Scene, cfg: &TrainConfig) -> Result<Vec<u8>, AstError> {
    let f = compute_features(scene, &cfg.features);
    predict(net, scene, &f, cfg)
}

#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub net: PointNetLite,
    pub labels: PseudoLabelMap,
    /// Mean combined loss per epoch.
    pub epoch_loss: Vec<f64>,
}

fn refresh_ambiguous(
    net: &PointNetLite,
    scene: &Scene,
    features: &Array2<f64>,
    partition: &PartitionMap,
    labels: &mut PseudoLabelMap,
    cfg: &TrainConfig,
) -> Result<(), AstError> {
    let ambiguous = partition.indices_of(PointCategory::Ambiguous);
    for &i in &ambiguous {
        if labels.get(i).is_some_and(|l| l.provenance == Provenance::AstPseudoLabel) {
            labels.clear(i);
        }
    }
    if ambiguous.is_empty() {
        return Ok(());
    }
    let mut mask = vec![false; scene.len()];
    for &i in &ambiguous {
        mask[i] = true;
    }
    let probs = predict_probs_for(net, scene, features, Some(&mask), cfg.batch_size, cfg.seed)?;
    let rows = probs.select(ndarray::Axis(0), &ambiguous);
    let cands: Vec<Vec<usize>> = ambiguous.iter().map(|&i| candidate_classes(scene, partition, i)).collect();
    for (k, pl) in pseudo_label_ambiguous(rows.view(), &cands, cfg.tau).into_iter().enumerate() {
        let i = ambiguous[k];
        if let Some((c, conf)) = pl {
            if labels.get(i).is_none() {
                labels.set(i, PseudoLabel::new(c as u8, conf.min(1.0), Provenance::AstPseudoLabel));
            }
        }
    }
    Ok(())
}

/// Trains the segmentation network on `initial` labels, refreshing
/// ambiguous-point pseudo labels as configured. Initial labels are never
/// modified; only AST-PL entries change between epochs.
pub fn train_segmentation(
    scene: &Scene,
    features: &Array2<f64>,
    partition: &PartitionMap,
    initial: &PseudoLabelMap,
    cfg: &TrainConfig,
) -> Result<SegmentationResult, AstError> {
    cfg.validate()?;
    if initial.len() != scene.len() {
        return Err(AstError::LabelLength {
            expected: scene.len(),
            found: initial.len(),
        });
    }
    if initial.labeled_count() == 0 {
        return Err(AstError::NoLabels);
    }
    let mut net = PointNetLite::new(cfg.net_config(scene.class_count), cfg.seed.wrapping_add(1))?;
    let mut labels = initial.clone();
    let box_class: Vec<Option<usize>> = (0..scene.len())
        .map(|i| partition.unique_box(i).map(|b| scene.boxes[b].class_id as usize))
        .collect();
    let chunks = scene.chunks();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa57_7a1e);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut steps: Vec<Vec<usize>> = Vec::new();
        for chunk in &chunks {
            let idx: Vec<usize> = chunk.range.clone().collect();
            steps.extend(split_batches(&idx, cfg.batch_size, &mut rng));
        }
        steps.shuffle(&mut rng);
        let (mut total, mut counted) = (0.0, 0usize);
        for batch in &steps {
            let targets: Vec<(usize, usize)> = batch
                .iter()
                .enumerate()
                .filter_map(|(r, &i)| labels.get(i).map(|l| (r, l.class_id as usize)))
                .collect();
            let attn_rows: Vec<(usize, usize)> = if cfg.attention {
                batch
                    .iter()
                    .enumerate()
                    .filter_map(|(r, &i)| box_class[i].map(|b| (r, b)))
                    .collect()
            } else {
                Vec::new()
            };
            if targets.is_empty() && attn_rows.is_empty() {
                continue;
            }
            let input = batch_input(features, &scene.points, batch, net.config.context_k);
            let pass = net.forward(&input)?;
            let (l_ce, mut dz) = cross_entropy(&pass.seg_logits, &targets);
            let (l_a, dz_a) = attention_loss_with_grad(&pass.seg_logits, &attn_rows, cfg.stop_grad_attention);
            dz.scaled_add(cfg.alpha, &dz_a);
            total += combined_loss(l_ce, l_a, cfg.alpha);
            counted += 1;
            let g = net.backward(
                &input,
                &pass,
                &LossGrad {
                    seg_logits: Some(dz),
                    class_logits: None,
                },
            )?;
            net.sgd_step(&g, lr);
        }
        epoch_loss.push(if counted > 0 { total / counted as f64 } else { 0.0 });
        if cfg.pseudo_label && (epoch + 1) % cfg.refresh_every == 0 {
            refresh_ambiguous(&net, scene, features, partition, &mut labels, cfg)?;
        }
    }
    Ok(SegmentationResult { net, labels, epoch_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn hand_attention_loss() {
        let s = array![[0.5, 0.5]];
        let y = array![[0.25, 0.75]];
        let l = attention_loss(s.view(), y.view(), &[0]).unwrap();
        assert!((l - 0.5 * -(0.25f64.ln())).abs() < 1e-12);
        assert!((l - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let s = array![[1.0, 0.2], [0.1, 1.0]];
        let y = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(attention_loss(s.view(), y.view(), &[0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn unit_attention_is_cross_entropy() {
        let y = array![[0.2, 0.8], [0.6, 0.4]];
        let s = Array2::ones((2, 2));
        let l = attention_loss(s.view(), y.view(), &[1, 0]).unwrap();
        let ce = -(0.8f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((l - ce).abs() < 1e-12);
    }

    #[test]
    fn shape_errors() {
        let a = Array2::<f64>::zeros((2, 3));
        let b = Array2::<f64>::zeros((2, 2));
        assert!(matches!(attention_loss(a.view(), b.view(), &[0, 0]), Err(AstError::Shape(_))));
        assert!(matches!(attention_loss(a.view(), a.view(), &[0]), Err(AstError::Shape(_))));
        assert!(matches!(attention_loss(a.view(), a.view(), &[0, 3]), Err(AstError::Shape(_))));
    }

    #[test]
    fn loss_with_grad_matches_plain_loss() {
        let z = array![[0.3, -1.2, 0.4], [2.0, 0.1, -0.5]];
        let (l, _) = attention_loss_with_grad(&z, &[(0, 2), (1, 0)], false);
        let s = z.mapv(sigmoid);
        let y = crate::net::softmax_rows(&z);
        let direct = attention_loss(s.view(), y.view(), &[2, 0]).unwrap();
        assert!((l - direct).abs() < 1e-12);
    }

    #[test]
    fn ambiguous_rules() {
        let y = array![[0.9, 0.05, 0.05], [0.395, 0.105, 0.5], [0.1, 0.1, 0.8]];
        let cands = vec![vec![0, 1], vec![0, 1], vec![1]];
        let out = pseudo_label_ambiguous(y.view(), &cands, 0.8);
        assert_eq!(out[0].unwrap().0, 0);
        // 0.395 / 0.5 = 0.79
        assert!(out[1].is_none());
        assert_eq!(out[2], Some((1, 1.0)));
    }

    #[test]
    fn combined() {
        assert!((combined_loss(1.0, 2.0, 0.001) - 1.002).abs() < 1e-15);
        assert_eq!(combined_loss(1.5, 7.0, 0.0), 1.5);
        assert_eq!(combined_loss(1.5, 0.0, 0.3), 1.5);
    }
}
