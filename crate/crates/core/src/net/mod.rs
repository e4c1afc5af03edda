//! A small point network with hand-written reverse-mode gradients.
//!
//! Layout: a shared per-point MLP encoder (affine + ReLU), with an optional
//! local-context step that concatenates each point's feature with the mean
//! feature of its nearest neighbors. The last encoder output `f_cam` feeds
//! two affine heads: a classifier over the globally average pooled feature,
//! and a per-point segmentation head producing logits `Z`. The attention map
//! is `sigmoid(Z)` and class probabilities are `softmax(Z)` per point.

pub mod checkpoint;
pub mod loss;
pub mod train;

use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spatial::knn_brute_force;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use loss::{cross_entropy, sigmoid_ce_loss, sigmoid_ce_with_grad};
pub use train::TrainConfig;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("non-finite activation in {0}")]
    NonFinite(&'static str),
    #[error("input has {found} feature columns, network expects {expected}")]
    InputWidth { expected: usize, found: usize },
    #[error("input has no points")]
    EmptyInput,
    #[error("gradient shape mismatch: {0}")]
    GradientShape(&'static str),
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub input_dim: usize,
    /// Encoder layer widths; the last one is the `f_cam` width.
    pub hidden: Vec<usize>,
    pub classes: usize,
    /// Neighbor count of the local-context step; `None` disables it.
    pub context_k: Option<usize>,
    /// Number of encoder layers applied before the context step.
    pub context_after: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: 3,
            hidden: vec![32, 64, 64],
            classes: 2,
            context_k: Some(8),
            context_after: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        if self.input_dim == 0 || self.classes == 0 {
            return bad("input_dim and classes must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be non-empty and positive".into());
        }
        if let Some(k) = self.context_k {
            if k == 0 {
                return bad("context_k must be positive".into());
            }
            if self.context_after == 0 || self.context_after >= self.hidden.len() {
                return bad(format!(
                    "context_after must be in [1, {}) for {} encoder layers",
                    self.hidden.len(),
                    self.hidden.len()
                ));
            }
        }
        Ok(())
    }

    fn uses_context_before(&self, layer: usize) -> bool {
        self.context_k.is_some() && layer == self.context_after
    }

    pub fn feature_width(&self) -> usize {
        *self.hidden.last().expect("validated")
    }
}

/// Affine map `x·W + b` with `W` stored as (in × out).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn uniform(fan_in: usize, fan_out: usize, limit: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

/// Network input: per-point features plus neighbor lists for the context step.
#[derive(Debug, Clone)]
pub struct NetInput {
    pub features: Array2<f64>,
    /// Neighbor indices per point; never empty (a lone point is its own neighbor).
    pub neighbors: Option<Vec<Vec<usize>>>,
}

impl NetInput {
    /// Builds the input, computing `k` exact nearest neighbors on `xyz` when `k` is set.
    pub fn new(features: Array2<f64>, xyz: &[[f64; 3]], k: Option<usize>) -> Self {
        let neighbors = k.map(|k| {
            knn_brute_force(xyz, k)
                .into_iter()
                .enumerate()
                .map(|(i, nn)| if nn.is_empty() { vec![i] } else { nn })
                .collect()
        });
        Self { features, neighbors }
    }

    pub fn without_context(features: Array2<f64>) -> Self {
        Self {
            features,
            neighbors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// Outputs and activation cache of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Last encoder features, N × F.
    pub f_cam: Array2<f64>,
    /// Classifier logits over the pooled feature, length C.
    pub class_logits: Array1<f64>,
    /// Segmentation logits `Z`, N × C.
    pub seg_logits: Array2<f64>,
    /// Attention map `S = sigmoid(Z)`.
    pub attention: Array2<f64>,
    /// Per-point class probabilities `Y = softmax(Z)`.
    pub probs: Array2<f64>,
    layer_inputs: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl ForwardPass {
    /// Which encoder units are active (positive pre-activation), flattened.
    /// Two passes with equal patterns lie on the same linear piece.
    pub fn active_units(&self) -> Vec<bool> {
        self.pre_activations.iter().flat_map(|a| a.iter().map(|&v| v > 0.0)).collect()
    }
}

/// Upstream gradients of a scalar loss with respect to the network outputs.
#[derive(Debug, Clone, Default)]
pub struct LossGrad {
    pub seg_logits: Option<Array2<f64>>,
    pub class_logits: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointNetLite {
    pub config: NetConfig,
    pub encoder: Vec<Dense>,
    pub class_head: Dense,
    pub seg_head: Dense,
}

/// Gradients with the same layout as [`PointNetLite`].
pub type Gradients = PointNetLite;

fn mean_of_neighbors(h: &Array2<f64>, neighbors: &[Vec<usize>]) -> Array2<f64> {
    let mut out = Array2::zeros(h.raw_dim());
    for (i, nn) in neighbors.iter().enumerate() {
        let inv = 1.0 / nn.len() as f64;
        let mut row = out.row_mut(i);
        for &j in nn {
            row.scaled_add(inv, &h.row(j));
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut y = z.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    y
}

impl PointNetLite {
    /// Randomly initialized network (He-uniform encoder, zero biases).
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(config.hidden.len());
        let mut width = config.input_dim;
        for (l, &out) in config.hidden.iter().enumerate() {
            let fan_in = if config.uses_context_before(l) { 2 * width } else { width };
            encoder.push(Dense::uniform(fan_in, out, (6.0 / fan_in as f64).sqrt(), &mut rng));
            width = out;
        }
        let head_limit = (1.0 / width as f64).sqrt();
        let class_head = Dense::uniform(width, config.classes, head_limit, &mut rng);
        let seg_head = Dense::uniform(width, config.classes, head_limit, &mut rng);
        Ok(Self {
            config,
            encoder,
            class_head,
            seg_head,
        })
    }

    /// Network with every parameter set to zero.
    pub fn zeros(config: NetConfig) -> Result<Self, NetError> {
        let mut net = Self::new(config, 0)?;
        net.params_mut().for_each(|p| *p = 0.0);
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.encoder.iter().map(Dense::param_count).sum::<usize>()
            + self.class_head.param_count()
            + self.seg_head.param_count()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.iter().chain([&self.class_head, &self.seg_head])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder.iter_mut().chain([&mut self.class_head, &mut self.seg_head])
    }

    /// Flat parameter view: encoder layers, then class head, then seg head;
    /// each as row-major weight followed by bias.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers().flat_map(Dense::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers_mut().flat_map(Dense::params_mut)
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.params().copied().collect()
    }

    pub fn set_from_slice(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.param_count(), "parameter count mismatch");
        for (p, v) in self.params_mut().zip(values) {
            *p = *v;
        }
    }

    /// A zeroed gradient buffer shaped like `self`.
    pub fn zeros_like(&self) -> Gradients {
        let mut g = self.clone();
        g.params_mut().for_each(|p| *p = 0.0);
        g
    }

    pub fn forward(&self, input: &NetInput) -> Result<ForwardPass, NetError> {
        let n = input.len();
        if n == 0 {
            return Err(NetError::EmptyInput);
        }
        if input.features.ncols() != self.config.input_dim {
            return Err(NetError::InputWidth {
                expected: self.config.input_dim,
                found: input.features.ncols(),
            });
        }
        let mut h = input.features.clone();
        let mut layer_inputs = Vec::with_capacity(self.encoder.len());
        let mut pre_activations = Vec::with_capacity(self.encoder.len());
        for (l, layer) in self.encoder.iter().enumerate() {
            let x = if self.config.uses_context_before(l) {
                let nbrs = input
                    .neighbors
                    .as_deref()
                    .ok_or_else(|| NetError::InvalidConfig("context step needs neighbor lists".into()))?;
                let ctx = mean_of_neighbors(&h, nbrs);
                ndarray::concatenate(Axis(1), &[h.view(), ctx.view()]).expect("row counts match")
            } else {
                h
            };
            let a = layer.apply(&x);
            h = a.mapv(|v| v.max(0.0));
            layer_inputs.push(x);
            pre_activations.push(a);
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("encoder"));
        }
        let pooled = h.mean_axis(Axis(0)).expect("n > 0");
        let class_logits = pooled.dot(&self.class_head.weight) + &self.class_head.bias;
        let seg_logits = self.seg_head.apply(&h);
        if class_logits.iter().chain(seg_logits.iter()).any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("heads"));
        }
        let attention = seg_logits.mapv(sigmoid);
        let probs = softmax_rows(&seg_logits);
        Ok(ForwardPass {
            f_cam: h,
            class_logits,
            seg_logits,
            attention,
            probs,
            layer_inputs,
            pre_activations,
        })
    }

    /// Reverse-mode gradients of the loss whose output gradients are `grad`.
    pub fn backward(&self, input: &NetInput, pass: &ForwardPass, grad: &LossGrad) -> Result<Gradients, NetError> {
        let n = pass.f_cam.nrows();
        let c = self.config.classes;
        let mut out = self.zeros_like();
        let mut d_f = Array2::<f64>::zeros(pass.f_cam.raw_dim());

        if let Some(dz) = &grad.seg_logits {
            if dz.dim() != (n, c) {
                return Err(NetError::GradientShape("segmentation logits"));
            }
            out.seg_head.weight = pass.f_cam.t().dot(dz);
            out.seg_head.bias = dz.sum_axis(Axis(0));
            d_f += &dz.dot(&self.seg_head.weight.t());
        }
        if let Some(dc) = &grad.class_logits {
            if dc.len() != c {
                return Err(NetError::GradientShape("class logits"));
            }
            let pooled = pass.f_cam.mean_axis(Axis(0)).expect("n > 0");
            let pooled_col = pooled.view().insert_axis(Axis(1));
            let dc_row = dc.view().insert_axis(Axis(0));
            out.class_head.weight = pooled_col.dot(&dc_row);
            out.class_head.bias = dc.clone();
            let d_pooled = self.class_head.weight.dot(dc) / n as f64;
            d_f += &d_pooled.view().insert_axis(Axis(0));
        }

        let mut dh = d_f;
        for l in (0..self.encoder.len()).rev() {
            let mut da = dh;
            Zip::from(&mut da)
                .and(&pass.pre_activations[l])
                .for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
            out.encoder[l].weight = pass.layer_inputs[l].t().dot(&da);
            out.encoder[l].bias = da.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let dx = da.dot(&self.encoder[l].weight.t());
            dh = if self.config.uses_context_before(l) {
                let w = dx.ncols() / 2;
                let mut direct = dx.slice(s![.., ..w]).to_owned();
                let dctx = dx.slice(s![.., w..]);
                let nbrs = input.neighbors.as_deref().expect("forward checked neighbors");
                for (i, nn) in nbrs.iter().enumerate() {
                    let inv = 1.0 / nn.len() as f64;
                    for &j in nn {
                        let mut row = direct.row_mut(j);
                        row.scaled_add(inv, &dctx.row(i));
                    }
                }
                direct
            } else {
                dx
            };
        }
        Ok(out)
    }

    /// Plain gradient-descent update `θ ← θ − lr·g`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.params_mut().zip(grads.params()) {
            *p -= lr * g;
        }
    }

    /// Builds a [`NetInput`] for the given features and coordinates using this
    /// network's context configuration.
    pub fn input(&self, features: Array2<f64>, xyz: &[[f64; 3]]) -> NetInput {
        NetInput::new(features, xyz, self.config.context_k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(classes: usize, context: bool) -> NetConfig {
        NetConfig {
            input_dim: 3,
            hidden: vec![5, 6, 4],
            classes,
            context_k: context.then_some(3),
            context_after: 2,
        }
    }

    fn random_points(n: usize, seed: u64) -> (Array2<f64>, Vec<[f64; 3]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xyz: Vec<[f64; 3]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let f = Array2::from_shape_fn((n, 3), |(i, j)| xyz[i][j]);
        (f, xyz)
    }

    #[test]
    fn zero_network_outputs() {
        let net = PointNetLite::zeros(small_config(4, true)).unwrap();
        let (f, xyz) = random_points(7, 1);
        let pass = net.forward(&net.input(f, &xyz)).unwrap();
        assert!(pass.seg_logits.iter().all(|&z| z == 0.0));
        assert!(pass.attention.iter().all(|&s| s == 0.5));
        assert!(pass.probs.iter().all(|&y| (y - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_rows_normalized() {
        let net = PointNetLite::new(small_config(4, true), 9).unwrap();
        let (f, xyz) = random_points(16, 2);
        let pass = net.forward(&net.input(f, &xyz)).unwrap();
        for row in pass.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        assert!(pass.attention.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn permutation_equivariance_without_context() {
        let net = PointNetLite::new(small_config(3, false), 5).unwrap();
        let (f, _) = random_points(10, 3);
        let perm: Vec<usize> = vec![3, 1, 4, 0, 9, 2, 6, 5, 8, 7];
        let fp = f.select(Axis(0), &perm);
        let a = net.forward(&NetInput::without_context(f)).unwrap();
        let b = net.forward(&NetInput::without_context(fp)).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(b.seg_logits[[k, c]], a.seg_logits[[i, c]]);
            }
        }
        for c in 0..3 {
            assert!((a.class_logits[c] - b.class_logits[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradient() {
        let net = PointNetLite::new(small_config(3, true), 5).unwrap();
        let (f, xyz) = random_points(8, 4);
        let input = net.input(f, &xyz);
        let pass = net.forward(&input).unwrap();
        let g = net
            .backward(
                &input,
                &pass,
                &LossGrad {
                    seg_logits: Some(Array2::zeros((8, 3))),
                    class_logits: Some(Array1::zeros(3)),
                },
            )
            .unwrap();
        assert!(g.params().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_width_and_bad_config() {
        let net = PointNetLite::new(small_config(3, false), 1).unwrap();
        let err = net.forward(&NetInput::without_context(Array2::zeros((2, 4)))).unwrap_err();
        assert!(matches!(err, NetError::InputWidth { expected: 3, found: 4 }));
        let mut cfg = small_config(3, true);
        cfg.context_after = 3;
        assert!(PointNetLite::new(cfg, 0).is_err());
    }

    #[test]
    fn non_finite_parameters_are_reported() {
        let mut net = PointNetLite::new(small_config(3, false), 1).unwrap();
        net.seg_head.bias[0] = f64::INFINITY;
        let (f, _) = random_points(4, 1);
        assert!(matches!(
            net.forward(&NetInput::without_context(f)),
            Err(NetError::NonFinite(_))
        ));
    }

    #[test]
    fn default_shape_matches_documented_widths() {
        let net = PointNetLite::new(NetConfig::default(), 0).unwrap();
        let widths: Vec<(usize, usize)> = net.encoder.iter().map(|d| d.weight.dim()).collect();
        assert_eq!(widths, vec![(3, 32), (32, 64), (128, 64)]);
    }
}
