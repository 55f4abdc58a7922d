//! Mini-batch gradient training for whole trees and for depth-1 subtrees
//! trained against a frozen context.
//!
//! The backward pass is composed by hand from the numerics kernels: the task
//! and penalty gradients land on the leaf-weight matrix, one bottom-up /
//! top-down sweep per sample turns those into split-score cotangents, and
//! the node kernels turn score cotangents into parameter gradients.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Matrix, Tensor};
use crate::objective::{
    combine_output, sample_penalty, sample_penalty_grad, split_penalty,
    split_penalty_grad_wrt_mass, task_loss_and_grad, total_loss_with_mode, LossBreakdown,
    ObjectiveConfig, Targets,
};
use crate::tree::{
    conv_node_backward, forward_cache, NodeId, NodeKind, NodeParams, Tree,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

/// Optional linear ramp for the penalty scales, from the configured values
/// to these end values over the training steps.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaSchedule {
    pub alpha_u_end: f64,
    pub alpha_s_end: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay: f64,
    /// Dropout rate on split-function weights (hyperplane coefficients and
    /// conv linear-layer weights); leaves are never masked.
    pub dropout: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_schedule: Option<AlphaSchedule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 100,
            optimizer: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_decay: 0.0,
            dropout: 0.1,
            patience: 10,
            min_delta: 1e-4,
            validation_fraction: 0.1,
            seed: 0,
            alpha_schedule: None,
            log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout rate must lie in [0, 1)".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(
                "validation fraction must lie in (0, 1)".into(),
            ));
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0 && self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Borrowed view of a dataset for the training loop.
#[derive(Clone, Copy)]
pub struct DataRef<'a> {
    pub features: &'a Matrix,
    pub targets: &'a Targets,
}

/// Per-leaf gradient buffers, shaped like the leaf parameters.
#[derive(Clone, Debug)]
pub struct LeafGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gradient of the objective for every trainable parameter. Node entries
/// reuse [`NodeParams`] as the container; the values are cotangents.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub nodes: BTreeMap<NodeId, NodeParams>,
    pub leaves: BTreeMap<NodeId, LeafGrads>,
}

/// Identifies one contiguous parameter buffer inside the tree.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotKey {
    pub node: NodeId,
    pub kind: SlotKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlotKind {
    NodeWeights,
    NodeBias,
    Kernel,
    ConvBias,
    LinearWeights,
    LinearBias,
    LeafWeights,
    LeafBias,
}

impl SlotKind {
    fn label(self) -> &'static str {
        match self {
            SlotKind::NodeWeights => "node weights",
            SlotKind::NodeBias => "node bias",
            SlotKind::Kernel => "kernel",
            SlotKind::ConvBias => "conv bias",
            SlotKind::LinearWeights => "linear weights",
            SlotKind::LinearBias => "linear bias",
            SlotKind::LeafWeights => "leaf weights",
            SlotKind::LeafBias => "leaf bias",
        }
    }
}

/// All parameter slots of a tree in a fixed, deterministic order.
pub fn param_slots(tree: &Tree) -> Vec<(SlotKey, usize)> {
    let mut out = Vec::new();
    for id in tree.inner_ids() {
        let node = tree.inner(id).expect("listed id");
        match &node.params {
            NodeParams::Hyperplane { weights, .. } => {
                out.push((
                    SlotKey {
                        node: id,
                        kind: SlotKind::NodeWeights,
                    },
                    weights.len(),
                ));
                out.push((
                    SlotKey {
                        node: id,
                        kind: SlotKind::NodeBias,
                    },
                    1,
                ));
            }
            NodeParams::Conv {
                kernel,
                conv_bias,
                linear_weights,
                ..
            } => {
                out.push((
                    SlotKey {
                        node: id,
                        kind: SlotKind::Kernel,
                    },
                    kernel.len(),
                ));
                out.push((
                    SlotKey {
                        node: id,
                        kind: SlotKind::ConvBias,
                    },
                    conv_bias.len(),
                ));
                if let Some(w) = linear_weights {
                    out.push((
                        SlotKey {
                            node: id,
                            kind: SlotKind::LinearWeights,
                        },
                        w.len(),
                    ));
                }
                out.push((
                    SlotKey {
                        node: id,
                        kind: SlotKind::LinearBias,
                    },
                    1,
                ));
            }
        }
    }
    for id in tree.leaf_ids() {
        let leaf = tree.leaf(id).expect("listed id");
        out.push((
            SlotKey {
                node: id,
                kind: SlotKind::LeafWeights,
            },
            leaf.weights.data().len(),
        ));
        out.push((
            SlotKey {
                node: id,
                kind: SlotKind::LeafBias,
            },
            leaf.bias.len(),
        ));
    }
    out
}

fn with_slot_mut<R>(
    tree: &mut Tree,
    key: SlotKey,
    f: impl FnOnce(&mut [f64]) -> R,
) -> Result<R> {
    if let Some(node) = tree.inner_mut(key.node) {
        match (&mut node.params, key.kind) {
            (NodeParams::Hyperplane { weights, .. }, SlotKind::NodeWeights) => {
                return Ok(f(weights))
            }
            (NodeParams::Hyperplane { bias, .. }, SlotKind::NodeBias) => {
                return Ok(f(std::slice::from_mut(bias)))
            }
            (NodeParams::Conv { kernel, .. }, SlotKind::Kernel) => {
                return Ok(f(kernel.data_mut()))
            }
            (NodeParams::Conv { conv_bias, .. }, SlotKind::ConvBias) => {
                return Ok(f(conv_bias))
            }
            (
                NodeParams::Conv {
                    linear_weights: Some(w),
                    ..
                },
                SlotKind::LinearWeights,
            ) => return Ok(f(w)),
            (NodeParams::Conv { linear_bias, .. }, SlotKind::LinearBias) => {
                return Ok(f(std::slice::from_mut(linear_bias)))
            }
            _ => {}
        }
    } else if let Some(leaf) = tree.leaf_mut(key.node) {
        match key.kind {
            SlotKind::LeafWeights => return Ok(f(leaf.weights.data_mut())),
            SlotKind::LeafBias => return Ok(f(&mut leaf.bias)),
            _ => {}
        }
    }
    Err(Error::Config(format!(
        "no parameter slot {:?} on node {}",
        key.kind, key.node
    )))
}

fn grad_slot<'a>(grads: &'a Gradients, key: &SlotKey) -> Option<&'a [f64]> {
    if let Some(params) = grads.nodes.get(&key.node) {
        match (params, key.kind) {
            (NodeParams::Hyperplane { weights, .. }, SlotKind::NodeWeights) => {
                return Some(weights)
            }
            (NodeParams::Hyperplane { bias, .. }, SlotKind::NodeBias) => {
                return Some(std::slice::from_ref(bias))
            }
            (NodeParams::Conv { kernel, .. }, SlotKind::Kernel) => return Some(kernel.data()),
            (NodeParams::Conv { conv_bias, .. }, SlotKind::ConvBias) => return Some(conv_bias),
            (
                NodeParams::Conv {
                    linear_weights: Some(w),
                    ..
                },
                SlotKind::LinearWeights,
            ) => return Some(w),
            (NodeParams::Conv { linear_bias, .. }, SlotKind::LinearBias) => {
                return Some(std::slice::from_ref(linear_bias))
            }
            _ => {}
        }
    }
    if let Some(leaf) = grads.leaves.get(&key.node) {
        match key.kind {
            SlotKind::LeafWeights => return Some(leaf.weights.data()),
            SlotKind::LeafBias => return Some(&leaf.bias),
            _ => {}
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

enum WalkNode {
    Inner {
        col: usize,
        left: usize,
        right: usize,
    },
    Leaf {
        col: usize,
    },
}

/// Tree structure flattened to slot arrays for the per-sample sweeps.
struct Walk {
    nodes: Vec<WalkNode>,
    root: usize,
    post_order: Vec<usize>,
}

impl Walk {
    fn new(tree: &Tree, node_col: &HashMap<NodeId, usize>, leaf_col: &HashMap<NodeId, usize>) -> Walk {
        fn rec(
            tree: &Tree,
            id: NodeId,
            node_col: &HashMap<NodeId, usize>,
            leaf_col: &HashMap<NodeId, usize>,
            nodes: &mut Vec<WalkNode>,
            post: &mut Vec<usize>,
        ) -> usize {
            if let Some(inner) = tree.inner(id) {
                let left = rec(tree, inner.left, node_col, leaf_col, nodes, post);
                let right = rec(tree, inner.right, node_col, leaf_col, nodes, post);
                let slot = nodes.len();
                nodes.push(WalkNode::Inner {
                    col: node_col[&id],
                    left,
                    right,
                });
                post.push(slot);
                slot
            } else {
                let slot = nodes.len();
                nodes.push(WalkNode::Leaf { col: leaf_col[&id] });
                post.push(slot);
                slot
            }
        }
        let mut nodes = Vec::new();
        let mut post = Vec::new();
        let root = rec(tree, tree.root(), node_col, leaf_col, &mut nodes, &mut post);
        Walk {
            nodes,
            root,
            post_order: post,
        }
    }

    /// Fills `score_cot[i]` for one sample given the leaf-weight cotangents
    /// `u_row` and the routing sigmoids.
    fn score_cotangents(
        &self,
        u_row: &[f64],
        sigma_row: &[f64],
        b: &mut [f64],
        score_cot_row: &mut [f64],
        stack: &mut Vec<(usize, f64)>,
    ) {
        for &slot in &self.post_order {
            b[slot] = match self.nodes[slot] {
                WalkNode::Leaf { col } => u_row[col],
                WalkNode::Inner { col, left, right } => {
                    let s = sigma_row[col];
                    (1.0 - s) * b[left] + s * b[right]
                }
            };
        }
        stack.clear();
        stack.push((self.root, 1.0));
        while let Some((slot, prefix)) = stack.pop() {
            if let WalkNode::Inner { col, left, right } = self.nodes[slot] {
                let s = sigma_row[col];
                score_cot_row[col] = prefix * (b[right] - b[left]) * s * (1.0 - s);
                stack.push((left, prefix * (1.0 - s)));
                stack.push((right, prefix * s));
            }
        }
    }
}

/// Exact gradient of the combined objective for every parameter, plus the
/// loss breakdown from the same forward pass. `scale` and `context` switch
/// on subtree mode: the tree output is multiplied per sample by `scale` and
/// added to `context` before the task loss; penalties always apply to this
/// tree's own leaf weights.
pub(crate) fn backward_with_mode(
    tree: &Tree,
    batch: &Matrix,
    targets: &Targets,
    cfg: &ObjectiveConfig,
    scale: Option<&[f64]>,
    context: Option<&Matrix>,
) -> Result<(LossBreakdown, Gradients)> {
    cfg.validate()?;
    let cache = forward_cache(tree, batch, true)?;
    let n = batch.rows();
    let k = tree.output_dim();
    let num_leaves = cache.weights.num_leaves();

    let combined = combine_output(&cache.phi, scale, context)?;
    let (task, mut delta) = task_loss_and_grad(&combined, targets, cfg.task_loss)?;
    if let Some(s) = scale {
        for i in 0..n {
            let w = s[i];
            for v in delta.row_mut(i) {
                *v *= w;
            }
        }
    }
    let split = split_penalty(&cache.weights, cfg.split_variant, cfg.epsilon)?;
    let sample = sample_penalty(&cache.weights, cfg.epsilon)?;
    for (name, value) in [("task loss", task), ("split penalty", split), ("sample penalty", sample)] {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} is non-finite: {value}")));
        }
    }
    let total = task + cfg.alpha_u * split + cfg.alpha_s * sample;

    // Cotangent of every leaf weight: task term plus both penalties.
    let ds = split_penalty_grad_wrt_mass(&cache.weights, cfg.split_variant, cfg.epsilon)?;
    let dw = sample_penalty_grad(&cache.weights, cfg.epsilon)?;
    let mut u = Matrix::zeros(n, num_leaves);
    for i in 0..n {
        let d_row = delta.row(i);
        let u_row = u.row_mut(i);
        for (col, outs) in cache.leaf_outputs.iter().enumerate() {
            u_row[col] = dot(d_row, outs.row(i)) + cfg.alpha_u * ds[col];
        }
        axpy(cfg.alpha_s, dw.row(i), u_row);
    }

    // Leaf parameter gradients.
    let mut leaves = BTreeMap::new();
    let d_in = tree.flat_dim();
    for (col, &leaf_id) in cache.weights.leaf_ids.iter().enumerate() {
        let mut gw = Matrix::zeros(k, d_in);
        let mut gb = vec![0.0; k];
        for i in 0..n {
            let w = cache.weights.weights.row(i)[col];
            if w == 0.0 {
                continue;
            }
            let d_row = delta.row(i);
            let x = batch.row(i);
            for c in 0..k {
                let coeff = w * d_row[c];
                if coeff != 0.0 {
                    axpy(coeff, x, gw.row_mut(c));
                    gb[c] += coeff;
                }
            }
        }
        leaves.insert(
            leaf_id,
            LeafGrads {
                weights: gw,
                bias: gb,
            },
        );
    }

    // Split-score cotangents via one bottom-up / top-down sweep per sample.
    let leaf_col: HashMap<NodeId, usize> = cache
        .weights
        .leaf_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let walk = Walk::new(tree, &cache.node_col, &leaf_col);
    let num_inner = cache.node_ids.len();
    let mut score_cot = Matrix::zeros(n, num_inner);
    let mut b_buf = vec![0.0; walk.nodes.len()];
    let mut stack = Vec::with_capacity(walk.nodes.len());
    for i in 0..n {
        walk.score_cotangents(
            u.row(i),
            cache.sigmas.row(i),
            &mut b_buf,
            score_cot.row_mut(i),
            &mut stack,
        );
    }

    // Node parameter gradients.
    let mut nodes = BTreeMap::new();
    let is_conv = tree.spec().kind == NodeKind::Convolutional;
    for (col, &id) in cache.node_ids.iter().enumerate() {
        let node = tree.inner(id).expect("cached id");
        match &node.params {
            NodeParams::Hyperplane { weights, .. } => {
                let mut gw = vec![0.0; weights.len()];
                let mut gb = 0.0;
                for i in 0..n {
                    let c = score_cot.row(i)[col];
                    if c != 0.0 {
                        axpy(c, batch.row(i), &mut gw);
                        gb += c;
                    }
                }
                nodes.insert(
                    id,
                    NodeParams::Hyperplane {
                        weights: gw,
                        bias: gb,
                    },
                );
            }
            params @ NodeParams::Conv {
                kernel,
                conv_bias,
                linear_weights,
                ..
            } => {
                debug_assert!(is_conv);
                let mut g_kernel = Tensor::zeros(kernel.shape().to_vec());
                let mut g_conv_bias = vec![0.0; conv_bias.len()];
                let mut g_linear = linear_weights.as_ref().map(|w| vec![0.0; w.len()]);
                let mut g_linear_bias = 0.0;
                for i in 0..n {
                    let c = score_cot.row(i)[col];
                    if c == 0.0 {
                        continue;
                    }
                    let image =
                        Tensor::new(tree.input_shape().to_vec(), batch.row(i).to_vec())?;
                    let g = conv_node_backward(
                        params,
                        tree.spec(),
                        &image,
                        &cache.conv_caches[col][i],
                        c,
                        false,
                    )?;
                    axpy(1.0, g.kernel.data(), g_kernel.data_mut());
                    axpy(1.0, &g.conv_bias, &mut g_conv_bias);
                    if let (Some(acc), Some(gl)) = (&mut g_linear, &g.linear_weights) {
                        axpy(1.0, gl, acc);
                    }
                    g_linear_bias += g.linear_bias;
                }
                nodes.insert(
                    id,
                    NodeParams::Conv {
                        kernel: g_kernel,
                        conv_bias: g_conv_bias,
                        linear_weights: g_linear,
                        linear_bias: g_linear_bias,
                    },
                );
            }
        }
    }

    Ok((
        LossBreakdown {
            task,
            split,
            sample,
            total,
        },
        Gradients { nodes, leaves },
    ))
}

/// Gradient of the full-tree objective; see [`backward_with_mode`].
pub fn backward(
    tree: &Tree,
    batch: &Matrix,
    targets: &Targets,
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, Gradients)> {
    backward_with_mode(tree, batch, targets, cfg, None, None)
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// First/second moment accumulators per parameter slot plus the step count.
#[derive(Clone, Debug, Default)]
pub struct OptState {
    step: u64,
    m: HashMap<SlotKey, Vec<f64>>,
    v: HashMap<SlotKey, Vec<f64>>,
}

impl OptState {
    pub fn new() -> OptState {
        OptState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer update over every parameter slot of the tree.
pub fn optimizer_step(
    tree: &mut Tree,
    grads: &Gradients,
    state: &mut OptState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let lr = cfg.learning_rate;

    for (key, len) in param_slots(tree) {
        let g: Vec<f64> = match grad_slot(grads, &key) {
            Some(g) => g.to_vec(),
            None => {
                return Err(Error::Config(format!(
                    "gradient missing for {} on node {}",
                    key.kind.label(),
                    key.node
                )))
            }
        };
        if g.len() != len {
            return Err(Error::Shape(format!(
                "gradient length {} vs parameter length {len} for {} on node {}",
                g.len(),
                key.kind.label(),
                key.node
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for {} on node {}",
                key.kind.label(),
                key.node
            )));
        }
        match cfg.optimizer {
            OptimizerKind::Sgd => {
                with_slot_mut(tree, key, |p| {
                    for (pi, gi) in p.iter_mut().zip(&g) {
                        *pi -= lr * gi;
                    }
                })?;
            }
            OptimizerKind::Adam | OptimizerKind::AdamW => {
                let m = state.m.entry(key).or_insert_with(|| vec![0.0; len]);
                for (mi, gi) in m.iter_mut().zip(&g) {
                    *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                }
                let m = m.clone();
                let v = state.v.entry(key).or_insert_with(|| vec![0.0; len]);
                for (vi, gi) in v.iter_mut().zip(&g) {
                    *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                }
                let v = v.clone();
                let decay = if cfg.optimizer == OptimizerKind::AdamW {
                    cfg.weight_decay
                } else {
                    0.0
                };
                with_slot_mut(tree, key, |p| {
                    for i in 0..p.len() {
                        if decay > 0.0 {
                            p[i] -= lr * decay * p[i];
                        }
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
                    }
                })?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Inverted-dropout mask: entries are 0 with probability `rate`, otherwise
/// 1/(1 - rate), so the masked weights keep their expectation.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect())
}

/// Masks for every droppable slot (split-function weight vectors).
fn draw_dropout_masks(
    tree: &Tree,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<SlotKey, Vec<f64>>> {
    let mut masks = BTreeMap::new();
    for (key, len) in param_slots(tree) {
        if matches!(key.kind, SlotKind::NodeWeights | SlotKind::LinearWeights) {
            masks.insert(key, dropout_mask(len, rate, rng.gen())?);
        }
    }
    Ok(masks)
}

fn apply_masks(tree: &mut Tree, masks: &BTreeMap<SlotKey, Vec<f64>>) -> Result<()> {
    for (key, mask) in masks {
        with_slot_mut(tree, *key, |p| {
            for (pi, mi) in p.iter_mut().zip(mask) {
                *pi *= mi;
            }
        })?;
    }
    Ok(())
}

/// Chain rule through the masked weights: the gradient with respect to the
/// unmasked parameter picks up the same mask factor.
fn mask_gradients(grads: &mut Gradients, masks: &BTreeMap<SlotKey, Vec<f64>>) {
    for (key, mask) in masks {
        if let Some(params) = grads.nodes.get_mut(&key.node) {
            let target: Option<&mut Vec<f64>> = match (params, key.kind) {
                (NodeParams::Hyperplane { weights, .. }, SlotKind::NodeWeights) => Some(weights),
                (
                    NodeParams::Conv {
                        linear_weights: Some(w),
                        ..
                    },
                    SlotKind::LinearWeights,
                ) => Some(w),
                _ => None,
            };
            if let Some(t) = target {
                for (g, m) in t.iter_mut().zip(mask) {
                    *g *= m;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_task: f64,
    pub val_split: f64,
    pub val_sample: f64,
    pub alpha_u: f64,
    pub alpha_s: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose snapshot was restored; 0 means the initial parameters.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_epoch: usize,
    pub wall_time_secs: f64,
}

struct Mode<'a> {
    scale: Option<&'a [f64]>,
    context: Option<&'a Matrix>,
}

impl<'a> Mode<'a> {
    fn plain() -> Mode<'a> {
        Mode {
            scale: None,
            context: None,
        }
    }

    fn gather(&self, idx: &[usize]) -> (Option<Vec<f64>>, Option<Matrix>) {
        let scale = self
            .scale
            .map(|s| idx.iter().map(|&i| s[i]).collect::<Vec<f64>>());
        let context = self.context.map(|ctx| {
            let mut m = Matrix::zeros(idx.len(), ctx.cols());
            for (row, &i) in idx.iter().enumerate() {
                m.row_mut(row).copy_from_slice(ctx.row(i));
            }
            m
        });
        (scale, context)
    }
}

fn gather_rows(features: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), features.cols());
    for (row, &i) in idx.iter().enumerate() {
        out.row_mut(row).copy_from_slice(features.row(i));
    }
    out
}

/// Total loss over a (possibly large) index set, evaluated in chunks.
fn eval_loss_on(
    tree: &Tree,
    features: &Matrix,
    targets: &Targets,
    idx: &[usize],
    obj: &ObjectiveConfig,
    mode: &Mode,
) -> Result<LossBreakdown> {
    const CHUNK: usize = 2048;
    let mut task = 0.0;
    let mut sample = 0.0;
    let mut total_rows = 0usize;
    // Split penalty depends on the whole mass distribution, so accumulate
    // column sums across chunks and finish afterwards.
    let mut col_sums: Vec<f64> = Vec::new();
    let mut leaf_ids = Vec::new();
    for chunk in idx.chunks(CHUNK) {
        let batch = gather_rows(features, chunk);
        let t = targets.gather(chunk);
        let (scale, context) = mode.gather(chunk);
        let cache = forward_cache(tree, &batch, false)?;
        let combined = combine_output(&cache.phi, scale.as_deref(), context.as_ref())?;
        let (task_c, _) = task_loss_and_grad(&combined, &t, obj.task_loss)?;
        let sample_c = sample_penalty(&cache.weights, obj.epsilon)?;
        let rows = chunk.len();
        task += task_c * rows as f64;
        sample += sample_c * rows as f64;
        total_rows += rows;
        if col_sums.is_empty() {
            col_sums = cache.weights.col_sums.clone();
            leaf_ids = cache.weights.leaf_ids.clone();
        } else {
            for (a, b) in col_sums.iter_mut().zip(&cache.weights.col_sums) {
                *a += b;
            }
        }
    }
    if total_rows == 0 {
        return Err(Error::Data("empty evaluation set".into()));
    }
    task /= total_rows as f64;
    sample /= total_rows as f64;
    let lw = crate::tree::LeafWeights {
        leaf_ids,
        weights: Matrix::zeros(0, col_sums.len()),
        col_sums,
    };
    let split = split_penalty(&lw, obj.split_variant, obj.epsilon)?;
    let total = task + obj.alpha_u * split + obj.alpha_s * sample;
    Ok(LossBreakdown {
        task,
        split,
        sample,
        total,
    })
}

fn effective_objective(
    obj: &ObjectiveConfig,
    cfg: &TrainConfig,
    step: usize,
    total_steps: usize,
) -> ObjectiveConfig {
    let mut out = obj.clone();
    if let Some(sched) = &cfg.alpha_schedule {
        let frac = if total_steps <= 1 {
            1.0
        } else {
            step as f64 / (total_steps - 1) as f64
        };
        out.alpha_u = obj.alpha_u + (sched.alpha_u_end - obj.alpha_u) * frac;
        out.alpha_s = obj.alpha_s + (sched.alpha_s_end - obj.alpha_s) * frac;
    }
    out
}

fn diverged(message: String, report: &TrainReport) -> Error {
    let last_report_json =
        serde_json::to_string(report).unwrap_or_else(|_| "{}".to_string());
    Error::Numeric(format!(
        "training diverged: {message}; last finite report: {last_report_json}"
    ))
}

#[allow(clippy::too_many_arguments)]
fn train_impl(
    tree: &mut Tree,
    features: &Matrix,
    targets: &Targets,
    mode: &Mode,
    batch_rows: usize,
    explicit_val: Option<&[usize]>,
    obj: &ObjectiveConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    obj.validate()?;
    let started = Instant::now();
    let n = features.rows();
    if n == 0 || batch_rows == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "{n} feature rows vs {} targets",
            targets.len()
        )));
    }

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_epoch: 0,
        wall_time_secs: 0.0,
    };
    if cfg.max_epochs == 0 {
        report.wall_time_secs = started.elapsed().as_secs_f64();
        return Ok(report);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut train_idx, val_idx): (Vec<usize>, Vec<usize>) = match explicit_val {
        Some(v) => ((0..batch_rows).collect(), v.to_vec()),
        None => {
            let mut idx: Vec<usize> = (0..batch_rows).collect();
            idx.shuffle(&mut rng);
            let val_count =
                ((batch_rows as f64 * cfg.validation_fraction).round() as usize).max(1);
            if val_count >= batch_rows {
                return Err(Error::Config(format!(
                    "validation fraction {} leaves no training rows (n = {batch_rows})",
                    cfg.validation_fraction
                )));
            }
            let val = idx.split_off(batch_rows - val_count);
            (idx, val)
        }
    };

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.max_epochs * steps_per_epoch).max(1);
    let mut state = OptState::new();
    let mut global_step = 0usize;

    let initial_obj = effective_objective(obj, cfg, 0, total_steps);
    let initial_val = eval_loss_on(tree, features, targets, &val_idx, &initial_obj, mode)?;
    let mut best_val = initial_val.total;
    let mut best_snapshot = tree.clone();
    let mut best_epoch = 0usize;
    let mut epochs_since_improvement = 0usize;

    let mut log_file = match &cfg.log_path {
        Some(path) => Some(std::fs::File::create(path)?),
        None => None,
    };

    for epoch in 1..=cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_rows = 0usize;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let batch = gather_rows(features, chunk);
            let batch_targets = targets.gather(chunk);
            let (scale_v, context_m) = mode.gather(chunk);
            let step_obj = effective_objective(obj, cfg, global_step, total_steps);
            global_step += 1;

            let result = if cfg.dropout > 0.0 {
                let masks = draw_dropout_masks(tree, cfg.dropout, &mut rng)?;
                let mut masked = tree.clone();
                apply_masks(&mut masked, &masks)?;
                backward_with_mode(
                    &masked,
                    &batch,
                    &batch_targets,
                    &step_obj,
                    scale_v.as_deref(),
                    context_m.as_ref(),
                )
                .map(|(loss, mut grads)| {
                    mask_gradients(&mut grads, &masks);
                    (loss, grads)
                })
            } else {
                backward_with_mode(
                    tree,
                    &batch,
                    &batch_targets,
                    &step_obj,
                    scale_v.as_deref(),
                    context_m.as_ref(),
                )
            };
            let (loss, grads) = match result {
                Ok(ok) => ok,
                Err(Error::Numeric(m)) => return Err(diverged(m, &report)),
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() {
                return Err(diverged(format!("batch loss {}", loss.total), &report));
            }
            epoch_loss += loss.total * chunk.len() as f64;
            epoch_rows += chunk.len();
            if let Err(Error::Numeric(m)) = optimizer_step(tree, &grads, &mut state, cfg) {
                return Err(diverged(m, &report));
            }
        }

        let epoch_obj = effective_objective(obj, cfg, global_step.saturating_sub(1), total_steps);
        let val = eval_loss_on(tree, features, targets, &val_idx, &epoch_obj, mode)?;
        if !val.total.is_finite() {
            return Err(diverged(format!("validation loss {}", val.total), &report));
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / epoch_rows.max(1) as f64,
            val_loss: val.total,
            val_task: val.task,
            val_split: val.split,
            val_sample: val.sample,
            alpha_u: epoch_obj.alpha_u,
            alpha_s: epoch_obj.alpha_s,
        };
        if let Some(f) = &mut log_file {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        report.epochs.push(record);
        report.stopped_epoch = epoch;

        if val.total < best_val {
            if best_val - val.total > cfg.min_delta {
                epochs_since_improvement = 0;
            } else {
                epochs_since_improvement += 1;
            }
            best_val = val.total;
            best_snapshot = tree.clone();
            best_epoch = epoch;
        } else {
            epochs_since_improvement += 1;
        }
        if epochs_since_improvement >= cfg.patience {
            break;
        }
    }

    *tree = best_snapshot;
    report.best_epoch = best_epoch;
    report.best_val_loss = best_val;
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Train a whole tree with shuffled mini-batches and early stopping; the
/// best validation snapshot is restored before returning. When `val` is
/// absent a validation split is carved from the training set.
pub fn train(
    tree: &mut Tree,
    data: DataRef,
    val: Option<DataRef>,
    obj: &ObjectiveConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    match val {
        None => {
            let n = data.features.rows();
            train_impl(
                tree,
                data.features,
                data.targets,
                &Mode::plain(),
                n,
                None,
                obj,
                cfg,
            )
        }
        Some(v) => {
            // Stack train + val so one index space covers both; only the
            // first n_train rows are batched.
            let n_train = data.features.rows();
            let n_val = v.features.rows();
            if v.features.cols() != data.features.cols() {
                return Err(Error::Shape(format!(
                    "validation width {} vs training width {}",
                    v.features.cols(),
                    data.features.cols()
                )));
            }
            let mut stacked = Matrix::zeros(n_train + n_val, data.features.cols());
            stacked.data_mut()[..n_train * data.features.cols()]
                .copy_from_slice(data.features.data());
            stacked.data_mut()[n_train * data.features.cols()..]
                .copy_from_slice(v.features.data());
            let targets = match (data.targets, v.targets) {
                (Targets::Classes(a), Targets::Classes(b)) => {
                    let mut all = a.clone();
                    all.extend_from_slice(b);
                    Targets::Classes(all)
                }
                (Targets::Values(a), Targets::Values(b)) => {
                    if a.cols() != b.cols() {
                        return Err(Error::Shape("target widths differ".into()));
                    }
                    let mut m = Matrix::zeros(a.rows() + b.rows(), a.cols());
                    m.data_mut()[..a.data().len()].copy_from_slice(a.data());
                    m.data_mut()[a.data().len()..].copy_from_slice(b.data());
                    Targets::Values(m)
                }
                _ => return Err(Error::Config("mixed target kinds".into())),
            };
            let val_idx: Vec<usize> = (n_train..n_train + n_val).collect();
            train_impl(
                tree,
                &stacked,
                &targets,
                &Mode::plain(),
                n_train,
                Some(&val_idx),
                obj,
                cfg,
            )
        }
    }
}

/// Train a depth-1 subtree in place of a leaf: the subtree's scaled output
/// is added to the frozen rest-of-tree context before the task loss, while
/// the penalties see only the subtree's two leaves. `leaf_weight` is the
/// replaced leaf's weight column, `frozen_context` the full-tree output
/// minus that leaf's contribution.
pub fn train_subtree(
    subtree: &mut Tree,
    data: DataRef,
    leaf_weight: &[f64],
    frozen_context: &Matrix,
    obj: &ObjectiveConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let n = data.features.rows();
    if leaf_weight.len() != n {
        return Err(Error::Shape(format!(
            "leaf weight column length {} vs {n} rows",
            leaf_weight.len()
        )));
    }
    if frozen_context.rows() != n || frozen_context.cols() != subtree.output_dim() {
        return Err(Error::Shape(format!(
            "frozen context {}x{} vs expected {n}x{}",
            frozen_context.rows(),
            frozen_context.cols(),
            subtree.output_dim()
        )));
    }
    if leaf_weight.iter().all(|&w| w == 0.0) {
        return Err(Error::Config(
            "replaced leaf carries no weight; nothing to train".into(),
        ));
    }
    let mode = Mode {
        scale: Some(leaf_weight),
        context: Some(frozen_context),
    };
    train_impl(
        subtree,
        data.features,
        data.targets,
        &mode,
        n,
        None,
        obj,
        cfg,
    )
}

/// Subtree-mode objective value, exposed for growth bookkeeping.
pub fn subtree_loss(
    subtree: &Tree,
    data: DataRef,
    leaf_weight: &[f64],
    frozen_context: &Matrix,
    obj: &ObjectiveConfig,
) -> Result<(f64, LossBreakdown)> {
    total_loss_with_mode(
        subtree,
        data.features,
        data.targets,
        obj,
        Some(leaf_weight),
        Some(frozen_context),
    )
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckGroup {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GradCheckGroup>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Central finite differences on every parameter group, compared against
/// [`backward`]. Relative error uses max(|a|, |b|, 1) in the denominator so
/// near-zero gradients compare absolutely.
pub fn gradient_check(
    tree: &Tree,
    batch: &Matrix,
    targets: &Targets,
    obj: &ObjectiveConfig,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = backward(tree, batch, targets, obj)?;
    let mut work = tree.clone();
    let mut groups = Vec::new();
    let mut overall: f64 = 0.0;
    for (key, len) in param_slots(tree) {
        let analytic = grad_slot(&grads, &key)
            .ok_or_else(|| Error::Config("missing gradient slot".into()))?
            .to_vec();
        let mut max_err: f64 = 0.0;
        for i in 0..len {
            let orig = with_slot_mut(&mut work, key, |p| p[i])?;
            with_slot_mut(&mut work, key, |p| p[i] = orig + step)?;
            let (plus, _) = total_loss_with_mode(&work, batch, targets, obj, None, None)?;
            with_slot_mut(&mut work, key, |p| p[i] = orig - step)?;
            let (minus, _) = total_loss_with_mode(&work, batch, targets, obj, None, None)?;
            with_slot_mut(&mut work, key, |p| p[i] = orig)?;
            let fd = (plus - minus) / (2.0 * step);
            let a = analytic[i];
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            max_err = max_err.max(err);
        }
        overall = overall.max(max_err);
        groups.push(GradCheckGroup {
            name: format!("node {} {}", key.node, key.kind.label()),
            max_rel_err: max_err,
        });
    }
    Ok(GradCheckReport {
        groups,
        max_rel_err: overall,
        tolerance,
        pass: overall < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{ConvSpec, NodeSpec, Task};
    use rand::rngs::StdRng;

    fn rand_matrix(rng: &mut StdRng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn hyperplane_tree(depth: usize, d: usize, k: usize, seed: u64) -> Tree {
        Tree::build_full(
            depth,
            NodeSpec::hyperplane(vec![d]),
            k,
            Task::Classification,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn identical_leaves_zero_inner_gradients() {
        let mut tree = hyperplane_tree(3, 5, 2, 3);
        let proto = tree.leaf(tree.leaf_order()[0]).unwrap().clone();
        for id in tree.leaf_ids().collect::<Vec<_>>() {
            let leaf = tree.leaf_mut(id).unwrap();
            leaf.weights = proto.weights.clone();
            leaf.bias = proto.bias.clone();
        }
        let mut rng = StdRng::seed_from_u64(1);
        let batch = rand_matrix(&mut rng, 6, 5);
        let targets = Targets::Classes((0..6).map(|_| rng.gen_range(0..2)).collect());
        let obj = ObjectiveConfig::for_task(Task::Classification);
        let (_, grads) = backward(&tree, &batch, &targets, &obj).unwrap();
        for params in grads.nodes.values() {
            let NodeParams::Hyperplane { weights, bias } = params else {
                panic!()
            };
            assert!(bias.abs() < 1e-9);
            assert!(weights.iter().all(|g| g.abs() < 1e-9));
        }
    }

    #[test]
    fn single_leaf_mse_bias_gradient_matches_hand_derivation() {
        let tree = Tree::single_leaf(NodeSpec::hyperplane(vec![3]), 4, Task::Regression, 7)
            .unwrap();
        let batch = Matrix::new(1, 3, vec![0.3, -0.7, 0.2]).unwrap();
        let y = Matrix::new(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let targets = Targets::Values(y.clone());
        let obj = ObjectiveConfig::for_task(Task::Regression);
        let (phi, _) = crate::tree::forward(&tree, &batch).unwrap();
        let (_, grads) = backward(&tree, &batch, &targets, &obj).unwrap();
        let leaf_id = tree.leaf_order()[0];
        let gb = &grads.leaves[&leaf_id].bias;
        for c in 0..4 {
            let expect = 2.0 * (phi.row(0)[c] - y.row(0)[c]) / 4.0;
            assert!((gb[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn hyperplane_backward_matches_finite_differences() {
        let tree = hyperplane_tree(3, 10, 3, 12);
        let mut rng = StdRng::seed_from_u64(5);
        let batch = rand_matrix(&mut rng, 8, 10);
        let targets = Targets::Classes((0..8).map(|_| rng.gen_range(0..3)).collect());
        let obj = ObjectiveConfig {
            alpha_u: 0.1,
            alpha_s: 0.1,
            ..ObjectiveConfig::for_task(Task::Classification)
        };
        let report = gradient_check(&tree, &batch, &targets, &obj, 1e-6, 1e-5).unwrap();
        assert!(
            report.pass,
            "max rel err {} in {:?}",
            report.max_rel_err,
            report
                .groups
                .iter()
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
                .map(|g| &g.name)
        );
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let spec = NodeSpec::convolutional(vec![1, 8, 8], ConvSpec::same(3));
        let tree = Tree::build_full(2, spec, 2, Task::Classification, 31).unwrap();
        let mut rng = StdRng::seed_from_u64(9);
        let batch = rand_matrix(&mut rng, 4, 64);
        let targets = Targets::Classes((0..4).map(|_| rng.gen_range(0..2)).collect());
        let obj = ObjectiveConfig {
            alpha_u: 0.1,
            alpha_s: 0.1,
            ..ObjectiveConfig::for_task(Task::Classification)
        };
        let report = gradient_check(&tree, &batch, &targets, &obj, 1e-6, 1e-5).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn subtree_mode_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(15);
        let subtree = hyperplane_tree(1, 6, 3, 8);
        let batch = rand_matrix(&mut rng, 5, 6);
        let targets = Targets::Classes((0..5).map(|_| rng.gen_range(0..3)).collect());
        let scale: Vec<f64> = (0..5).map(|_| rng.gen_range(0.1..1.0)).collect();
        let context = rand_matrix(&mut rng, 5, 3);
        let obj = ObjectiveConfig {
            alpha_u: 0.2,
            alpha_s: 0.15,
            ..ObjectiveConfig::for_task(Task::Classification)
        };
        let (_, grads) =
            backward_with_mode(&subtree, &batch, &targets, &obj, Some(&scale), Some(&context))
                .unwrap();

        let mut work = subtree.clone();
        let h = 1e-6;
        for (key, len) in param_slots(&subtree) {
            let analytic = grad_slot(&grads, &key).unwrap().to_vec();
            for i in 0..len {
                let orig = with_slot_mut(&mut work, key, |p| p[i]).unwrap();
                with_slot_mut(&mut work, key, |p| p[i] = orig + h).unwrap();
                let (plus, _) = total_loss_with_mode(
                    &work,
                    &batch,
                    &targets,
                    &obj,
                    Some(&scale),
                    Some(&context),
                )
                .unwrap();
                with_slot_mut(&mut work, key, |p| p[i] = orig - h).unwrap();
                let (minus, _) = total_loss_with_mode(
                    &work,
                    &batch,
                    &targets,
                    &obj,
                    Some(&scale),
                    Some(&context),
                )
                .unwrap();
                with_slot_mut(&mut work, key, |p| p[i] = orig).unwrap();
                let fd = (plus - minus) / (2.0 * h);
                let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1.0);
                assert!(err < 1e-5, "slot {key:?} index {i}: {err}");
            }
        }
    }

    fn unit_gradients(tree: &Tree) -> Gradients {
        let mut nodes = BTreeMap::new();
        for id in tree.inner_ids() {
            let g = match &tree.inner(id).unwrap().params {
                NodeParams::Hyperplane { weights, .. } => NodeParams::Hyperplane {
                    weights: vec![1.0; weights.len()],
                    bias: 1.0,
                },
                NodeParams::Conv {
                    kernel,
                    conv_bias,
                    linear_weights,
                    ..
                } => NodeParams::Conv {
                    kernel: Tensor::new(kernel.shape().to_vec(), vec![1.0; kernel.len()])
                        .unwrap(),
                    conv_bias: vec![1.0; conv_bias.len()],
                    linear_weights: linear_weights.as_ref().map(|w| vec![1.0; w.len()]),
                    linear_bias: 1.0,
                },
            };
            nodes.insert(id, g);
        }
        let mut leaves = BTreeMap::new();
        for id in tree.leaf_ids() {
            let leaf = tree.leaf(id).unwrap();
            leaves.insert(
                id,
                LeafGrads {
                    weights: Matrix::new(
                        leaf.weights.rows(),
                        leaf.weights.cols(),
                        vec![1.0; leaf.weights.data().len()],
                    )
                    .unwrap(),
                    bias: vec![1.0; leaf.bias.len()],
                },
            );
        }
        Gradients { nodes, leaves }
    }

    #[test]
    fn sgd_step_moves_against_gradient() {
        let mut tree = hyperplane_tree(1, 2, 2, 1);
        let before = tree.leaf(tree.leaf_order()[0]).unwrap().bias.clone();
        let grads = unit_gradients(&tree);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut state = OptState::new();
        optimizer_step(&mut tree, &grads, &mut state, &cfg).unwrap();
        let after = &tree.leaf(tree.leaf_order()[0]).unwrap().bias;
        for (b, a) in before.iter().zip(after) {
            assert!((b - 0.1 - a).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        for g_scale in [1e-3, 1.0, 1e3] {
            let mut tree = hyperplane_tree(1, 2, 2, 1);
            let before = tree.leaf(tree.leaf_order()[0]).unwrap().bias[0];
            let mut grads = unit_gradients(&tree);
            for leaf in grads.leaves.values_mut() {
                leaf.bias.iter_mut().for_each(|g| *g *= g_scale);
                leaf.weights.data_mut().iter_mut().for_each(|g| *g *= g_scale);
            }
            let cfg = TrainConfig {
                optimizer: OptimizerKind::Adam,
                learning_rate: 0.01,
                ..TrainConfig::default()
            };
            let mut state = OptState::new();
            optimizer_step(&mut tree, &grads, &mut state, &cfg).unwrap();
            let after = tree.leaf(tree.leaf_order()[0]).unwrap().bias[0];
            let step = (before - after).abs();
            assert!(
                (step - 0.01).abs() < 1e-4,
                "g_scale {g_scale}: step {step}"
            );
        }
    }

    #[test]
    fn adamw_decays_with_zero_gradient() {
        let mut tree = hyperplane_tree(1, 2, 2, 1);
        let mut grads = unit_gradients(&tree);
        for params in grads.nodes.values_mut() {
            if let NodeParams::Hyperplane { weights, bias } = params {
                weights.iter_mut().for_each(|g| *g = 0.0);
                *bias = 0.0;
            }
        }
        for leaf in grads.leaves.values_mut() {
            leaf.bias.iter_mut().for_each(|g| *g = 0.0);
            leaf.weights.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
        let cfg = TrainConfig {
            optimizer: OptimizerKind::AdamW,
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let root = tree.root();
        let before = match &tree.inner(root).unwrap().params {
            NodeParams::Hyperplane { weights, .. } => weights.clone(),
            _ => panic!(),
        };
        let mut state = OptState::new();
        optimizer_step(&mut tree, &grads, &mut state, &cfg).unwrap();
        let after = match &tree.inner(root).unwrap().params {
            NodeParams::Hyperplane { weights, .. } => weights.clone(),
            _ => panic!(),
        };
        for (b, a) in before.iter().zip(&after) {
            assert!((a - b * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut tree = hyperplane_tree(1, 2, 2, 1);
        let mut grads = unit_gradients(&tree);
        if let Some(leaf) = grads.leaves.values_mut().next() {
            leaf.bias[0] = f64::NAN;
        }
        let mut state = OptState::new();
        assert!(matches!(
            optimizer_step(&mut tree, &grads, &mut state, &TrainConfig::default()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn dropout_mask_properties() {
        let zero = dropout_mask(16, 0.0, 4).unwrap();
        assert!(zero.iter().all(|&m| m == 1.0));
        let a = dropout_mask(64, 0.3, 11).unwrap();
        let b = dropout_mask(64, 0.3, 11).unwrap();
        assert_eq!(a, b);
        assert!(dropout_mask(4, 1.0, 0).is_err());

        // Monte-Carlo expectation: mean of masked weight stays within 5%.
        let mut acc = 0.0;
        let draws = 10_000;
        for seed in 0..draws {
            let m = dropout_mask(1, 0.4, seed).unwrap();
            acc += m[0];
        }
        let mean = acc / draws as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    fn blob_data(n_per: usize, d: usize, seed: u64) -> (Matrix, Targets) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let class = i % 2;
            let center = if class == 0 { -2.0 } else { 2.0 };
            for _ in 0..d {
                rows.push(center + rng.gen_range(-0.5..0.5));
            }
            labels.push(class);
        }
        (
            Matrix::new(2 * n_per, d, rows).unwrap(),
            Targets::Classes(labels),
        )
    }

    #[test]
    fn zero_epochs_returns_initial_tree() {
        let tree0 = hyperplane_tree(1, 2, 2, 9);
        let mut tree = tree0.clone();
        let (x, y) = blob_data(10, 2, 0);
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let report = train(
            &mut tree,
            DataRef {
                features: &x,
                targets: &y,
            },
            None,
            &ObjectiveConfig::for_task(Task::Classification),
            &cfg,
        )
        .unwrap();
        assert!(report.epochs.is_empty());
        let id = tree0.leaf_order()[0];
        assert_eq!(
            tree0.leaf(id).unwrap().weights,
            tree.leaf(id).unwrap().weights
        );
    }

    #[test]
    fn separable_blobs_reach_high_accuracy() {
        let (x, y) = blob_data(60, 4, 3);
        let mut tree = hyperplane_tree(1, 4, 2, 5);
        let cfg = TrainConfig {
            max_epochs: 50,
            batch_size: 16,
            learning_rate: 0.05,
            dropout: 0.0,
            seed: 7,
            ..TrainConfig::default()
        };
        train(
            &mut tree,
            DataRef {
                features: &x,
                targets: &y,
            },
            None,
            &ObjectiveConfig::for_task(Task::Classification),
            &cfg,
        )
        .unwrap();
        let crate::tree::Prediction::Labels(pred) = crate::tree::predict(&tree, &x).unwrap()
        else {
            panic!()
        };
        let Targets::Classes(labels) = &y else { panic!() };
        let correct = pred
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        let acc = correct as f64 / labels.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn first_epoch_reduces_training_loss() {
        let (x, y) = blob_data(40, 6, 11);
        let mut tree = hyperplane_tree(2, 6, 2, 21);
        let obj = ObjectiveConfig::for_task(Task::Classification);
        let (initial, _) = crate::objective::total_loss(&tree, &x, &y, &obj).unwrap();
        let cfg = TrainConfig {
            max_epochs: 1,
            batch_size: 16,
            learning_rate: 0.01,
            dropout: 0.0,
            seed: 2,
            ..TrainConfig::default()
        };
        let report = train(
            &mut tree,
            DataRef {
                features: &x,
                targets: &y,
            },
            None,
            &obj,
            &cfg,
        )
        .unwrap();
        assert!(report.epochs[0].train_loss < initial);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (x, y) = blob_data(30, 3, 17);
        let cfg = TrainConfig {
            max_epochs: 5,
            batch_size: 8,
            dropout: 0.2,
            seed: 13,
            ..TrainConfig::default()
        };
        let obj = ObjectiveConfig::for_task(Task::Classification);
        let mut t1 = hyperplane_tree(2, 3, 2, 1);
        let mut t2 = hyperplane_tree(2, 3, 2, 1);
        train(
            &mut t1,
            DataRef {
                features: &x,
                targets: &y,
            },
            None,
            &obj,
            &cfg,
        )
        .unwrap();
        train(
            &mut t2,
            DataRef {
                features: &x,
                targets: &y,
            },
            None,
            &obj,
            &cfg,
        )
        .unwrap();
        for id in t1.leaf_ids().collect::<Vec<_>>() {
            assert_eq!(t1.leaf(id).unwrap().weights, t2.leaf(id).unwrap().weights);
            assert_eq!(t1.leaf(id).unwrap().bias, t2.leaf(id).unwrap().bias);
        }
        for id in t1.inner_ids().collect::<Vec<_>>() {
            assert_eq!(t1.inner(id).unwrap().params, t2.inner(id).unwrap().params);
        }
    }

    #[test]
    fn subtree_with_unit_scale_and_zero_context_matches_plain_training() {
        let (x, y) = blob_data(20, 3, 23);
        let obj = ObjectiveConfig::for_task(Task::Classification);
        let cfg = TrainConfig {
            max_epochs: 4,
            batch_size: 8,
            dropout: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut plain = hyperplane_tree(1, 3, 2, 2);
        let mut subtree = plain.clone();
        train(
            &mut plain,
            DataRef {
                features: &x,
                targets: &y,
            },
            None,
            &obj,
            &cfg,
        )
        .unwrap();
        let ones = vec![1.0; x.rows()];
        let zeros = Matrix::zeros(x.rows(), 2);
        train_subtree(
            &mut subtree,
            DataRef {
                features: &x,
                targets: &y,
            },
            &ones,
            &zeros,
            &obj,
            &cfg,
        )
        .unwrap();
        for id in plain.inner_ids().collect::<Vec<_>>() {
            assert_eq!(
                plain.inner(id).unwrap().params,
                subtree.inner(id).unwrap().params
            );
        }
    }

    #[test]
    fn subtree_rejects_zero_weight_column() {
        let (x, y) = blob_data(5, 2, 31);
        let mut subtree = hyperplane_tree(1, 2, 2, 4);
        let zeros_w = vec![0.0; x.rows()];
        let ctx = Matrix::zeros(x.rows(), 2);
        assert!(matches!(
            train_subtree(
                &mut subtree,
                DataRef {
                    features: &x,
                    targets: &y
                },
                &zeros_w,
                &ctx,
                &ObjectiveConfig::for_task(Task::Classification),
                &TrainConfig::default()
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gradient_check_zero_tolerance_fails() {
        let tree = hyperplane_tree(1, 3, 2, 6);
        let mut rng = StdRng::seed_from_u64(2);
        let batch = rand_matrix(&mut rng, 4, 3);
        let targets = Targets::Classes(vec![0, 1, 0, 1]);
        let obj = ObjectiveConfig::for_task(Task::Classification);
        let report = gradient_check(&tree, &batch, &targets, &obj, 1e-6, 0.0).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn zero_learning_rate_rejected_and_identity_alternative() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
