//! Scalar losses with gradients with respect to network outputs.

use ndarray::{Array1, Array2, ArrayView1};

use crate::scene::SubcloudTag;

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Multi-label sigmoid cross-entropy summed over classes:
/// `Σ_c softplus(z_c) − y_c·z_c`.
pub fn sigmoid_ce_loss(logits: ArrayView1<f64>, tag: &SubcloudTag) -> f64 {
    sigmoid_ce_with_grad(logits, tag).0
}

/// Loss and its gradient `σ(z) − y` with respect to the logits.
pub fn sigmoid_ce_with_grad(logits: ArrayView1<f64>, tag: &SubcloudTag) -> (f64, Array1<f64>) {
    assert_eq!(logits.len(), tag.len(), "logit count must equal tag length");
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(tag.bits())
        .map(|(&z, &on)| {
            let y = if on { 1.0 } else { 0.0 };
            loss += softplus(z) - y * z;
            super::sigmoid(z) - y
        })
        .collect();
    (loss, grad)
}

/// Row log-softmax of `z`.
pub fn log_softmax_row(z: ArrayView1<f64>) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.mapv(|v| v - lse)
}

/// Softmax cross-entropy averaged over `targets` (`(point, class)` pairs).
/// Returns the loss and its gradient with respect to all of `logits`; rows
/// without a target get zero gradient. An empty target list gives zero loss.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[(usize, usize)]) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(logits.raw_dim());
    if targets.is_empty() {
        return (0.0, grad);
    }
    let inv = 1.0 / targets.len() as f64;
    let mut loss = 0.0;
    for &(i, c) in targets {
        let logp = log_softmax_row(logits.row(i));
        loss -= logp[c] * inv;
        let mut g = grad.row_mut(i);
        for (k, lp) in logp.iter().enumerate() {
            g[k] += inv * (lp.exp() - if k == c { 1.0 } else { 0.0 });
        }
    }
    (loss, grad)
}
