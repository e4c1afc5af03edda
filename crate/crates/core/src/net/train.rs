//! Training hyperparameters and batching shared by the classifier and the
//! segmentation trainer.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{NetConfig, NetError, NetInput};
use crate::features::FeatureParams;
use crate::scene::Point;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub decay: f64,
    pub epochs: usize,
    /// Weight of the attention loss in the combined objective.
    pub alpha: f64,
    /// Confidence threshold for ambiguous-point pseudo labels.
    pub tau: f64,
    /// Fraction of background pseudo labels kept by refinement.
    pub refine_fraction: f64,
    /// Points per SGD step; chunks larger than this are split.
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Neighbors of the local-context step, 0 to disable.
    pub context_k: usize,
    pub features: FeatureParams,
    /// Add the attention loss for unique-box points.
    pub attention: bool,
    /// Treat the attention map as a constant in the attention loss gradient.
    pub stop_grad_attention: bool,
    /// Pseudo-label ambiguous points during training.
    pub pseudo_label: bool,
    /// Epochs between ambiguous-point pseudo-label refreshes.
    pub refresh_every: usize,
    /// Keep only the most confident background pseudo labels.
    pub refine: bool,
    /// Restrict background labels to the scene's background classes.
    pub restrict_bg_classes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            decay: 0.95,
            epochs: 40,
            alpha: 0.001,
            tau: 0.8,
            refine_fraction: 0.2,
            batch_size: 32,
            seed: 0,
            hidden: vec![32, 64, 64],
            context_k: 0,
            features: FeatureParams::default(),
            attention: true,
            stop_grad_attention: false,
            pseudo_label: true,
            refresh_every: 1,
            refine: true,
            restrict_bg_classes: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must be in (0, 1]");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be non-negative");
        }
        // tau may exceed 1 to switch ambiguous pseudo labels off
        if !(self.tau >= 0.0) {
            return bad("tau must be non-negative");
        }
        if !(self.refine_fraction > 0.0 && self.refine_fraction <= 1.0) {
            return bad("refine_fraction must be in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.refresh_every == 0 {
            return bad("refresh_every must be positive");
        }
        Ok(())
    }

    /// Learning rate used during epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi(epoch as i32)
    }

    pub fn net_config(&self, classes: usize) -> NetConfig {
        NetConfig {
            input_dim: self.features.mode.dim(),
            hidden: self.hidden.clone(),
            classes,
            context_k: (self.context_k > 0).then_some(self.context_k),
            context_after: 2.min(self.hidden.len().saturating_sub(1)),
        }
    }
}

/// Shuffles `indices` and splits them into `ceil(n / batch_size)` batches of
/// near-equal size.
pub fn split_batches(indices: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    if indices.is_empty() {
        return Vec::new();
    }
    let mut idx = indices.to_vec();
    idx.shuffle(rng);
    let parts = idx.len().div_ceil(batch_size);
    let mut out = vec![Vec::new(); parts];
    for (k, i) in idx.into_iter().enumerate() {
        out[k % parts].push(i);
    }
    for b in &mut out {
        b.sort_unstable();
    }
    out
}

/// Network input for a subset of scene points.
pub fn batch_input(features: &Array2<f64>, points: &[Point], batch: &[usize], context_k: Option<usize>) -> NetInput {
    let f = features.select(Axis(0), batch);
    let xyz: Vec<[f64; 3]> = batch.iter().map(|&i| points[i].xyz()).collect();
    NetInput::new(f, &xyz, context_k)
}
