//! Evaluation metrics and interpretability instruments: leaf-concentration
//! reporting, per-node coefficient export as grayscale images, and feature
//! visualization by regularized gradient ascent on the input.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::objective::Targets;
use crate::tree::{
    forward_cache, node_activation_with_input_grad, LeafWeights, NodeId, Task, Tree,
};

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Data("empty input".into()));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Area under the ROC curve via the Mann-Whitney rank statistic with
/// average ranks for ties; equal to the trapezoidal ROC area.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Data(
            "AUC undefined: both classes must be present".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Average rank within each tie group (ranks are 1-based).
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos = positives as f64;
    let n_neg = negatives as f64;
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FractionSpec {
    pub k: usize,
    pub alpha: f64,
}

impl FractionSpec {
    pub fn validate(&self, num_leaves: usize) -> Result<()> {
        if self.k == 0 || self.k > num_leaves {
            return Err(Error::Config(format!(
                "k must lie in 1..={num_leaves}, got {}",
                self.k
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Share of samples whose top-k leaf weights sum to at least alpha. Rows
/// sum to 1, so alpha is also the fraction of total weight.
pub fn k_alpha_fraction(weights: &LeafWeights, spec: &FractionSpec) -> Result<f64> {
    spec.validate(weights.num_leaves())?;
    let n = weights.weights.rows();
    if n == 0 {
        return Err(Error::Data("empty weights".into()));
    }
    let mut hits = 0usize;
    let mut row_buf: Vec<f64> = Vec::with_capacity(weights.num_leaves());
    for i in 0..n {
        row_buf.clear();
        row_buf.extend_from_slice(weights.weights.row(i));
        row_buf.sort_by(|a, b| b.total_cmp(a));
        let top: f64 = row_buf[..spec.k].iter().sum();
        if top >= spec.alpha {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Soft class mass per leaf, and per inner node the fraction of each class
/// routed to its right child (strictly greater subtree mass; ties count as
/// left).
#[derive(Clone, Debug, Serialize)]
pub struct ClassDistribution {
    pub classes: usize,
    pub leaves: Vec<LeafClassMass>,
    pub nodes: Vec<NodeRouting>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LeafClassMass {
    pub leaf_id: u32,
    /// mass[c] = sum of leaf weights over samples of class c.
    pub mass: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct NodeRouting {
    pub node_id: u32,
    /// right_fraction[c] = fraction of class-c samples whose weight on the
    /// right child exceeds the weight on the left child.
    pub right_fraction: Vec<f64>,
}

pub fn leaf_class_distribution(tree: &Tree, batch: &Matrix, targets: &Targets) -> Result<ClassDistribution> {
    if tree.task() != Task::Classification {
        return Err(Error::Config(
            "class distribution requires a classification tree".into(),
        ));
    }
    let Targets::Classes(labels) = targets else {
        return Err(Error::Config("class targets required".into()));
    };
    if labels.len() != batch.rows() {
        return Err(Error::Shape(format!(
            "{} labels vs {} rows",
            labels.len(),
            batch.rows()
        )));
    }
    let classes = tree.output_dim();
    if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let cache = forward_cache(tree, batch, false)?;
    let n = batch.rows();

    let mut leaves: Vec<LeafClassMass> = cache
        .weights
        .leaf_ids
        .iter()
        .map(|id| LeafClassMass {
            leaf_id: id.0,
            mass: vec![0.0; classes],
        })
        .collect();
    for i in 0..n {
        let c = labels[i];
        for (col, lm) in leaves.iter_mut().enumerate() {
            lm.mass[c] += cache.weights.weights.row(i)[col];
        }
    }

    // Subtree mass per child: sum the leaf weights under each side.
    let mut class_counts = vec![0usize; classes];
    for &c in labels {
        class_counts[c] += 1;
    }
    let leaf_col = |id: NodeId| cache.weights.column_of(id).expect("leaf column");
    fn leaves_under(tree: &Tree, id: NodeId, out: &mut Vec<NodeId>) {
        if let Some(node) = tree.inner(id) {
            leaves_under(tree, node.left, out);
            leaves_under(tree, node.right, out);
        } else {
            out.push(id);
        }
    }
    let mut nodes = Vec::new();
    for node_id in tree.inner_ids() {
        let node = tree.inner(node_id).expect("listed id");
        let mut left_leaves = Vec::new();
        let mut right_leaves = Vec::new();
        leaves_under(tree, node.left, &mut left_leaves);
        leaves_under(tree, node.right, &mut right_leaves);
        let left_cols: Vec<usize> = left_leaves.iter().map(|&l| leaf_col(l)).collect();
        let right_cols: Vec<usize> = right_leaves.iter().map(|&l| leaf_col(l)).collect();
        let mut right_count = vec![0usize; classes];
        for i in 0..n {
            let row = cache.weights.weights.row(i);
            let left_mass: f64 = left_cols.iter().map(|&c| row[c]).sum();
            let right_mass: f64 = right_cols.iter().map(|&c| row[c]).sum();
            if right_mass > left_mass {
                right_count[labels[i]] += 1;
            }
        }
        nodes.push(NodeRouting {
            node_id: node_id.0,
            right_fraction: right_count
                .iter()
                .zip(&class_counts)
                .map(|(&r, &t)| if t == 0 { 0.0 } else { r as f64 / t as f64 })
                .collect(),
        });
    }
    Ok(ClassDistribution {
        classes,
        leaves,
        nodes,
    })
}

/// Min-max normalizes `values` to [0, 255] and writes a binary PGM (P5).
/// A degenerate range renders mid-gray.
pub fn write_pgm(values: &[f64], height: usize, width: usize, path: &Path) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::Shape(format!(
            "{} values vs {height}x{width} layout",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("non-finite pixel value".into()));
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bytes: Vec<u8> = if hi > lo {
        values
            .iter()
            .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128u8; values.len()]
    };
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(&bytes)?;
    Ok(())
}

/// The coefficient vector a node exposes for visualization: hyperplane
/// weights over the input, or the conv node's linear-layer weights over the
/// pooled map.
pub fn node_coefficients(tree: &Tree, node_id: NodeId) -> Result<(Vec<f64>, Vec<usize>)> {
    let node = tree
        .inner(node_id)
        .ok_or_else(|| Error::Config(format!("unknown inner node {node_id}")))?;
    match &node.params {
        crate::tree::NodeParams::Hyperplane { weights, .. } => {
            let shape = tree.input_shape().to_vec();
            let layout = if shape.len() == 3 {
                vec![shape[1], shape[2]]
            } else {
                vec![1, shape[0]]
            };
            Ok((weights.clone(), layout))
        }
        crate::tree::NodeParams::Conv { linear_weights, .. } => {
            let w = linear_weights.as_ref().ok_or_else(|| {
                Error::Config(format!(
                    "node {node_id} uses the sum readout and has no linear coefficients"
                ))
            })?;
            let geom = tree.spec().conv_geometry()?;
            Ok((w.clone(), vec![geom.pooled_h, geom.pooled_w]))
        }
    }
}

/// Exports one node's coefficients as a grayscale PGM with the given
/// layout (rows x cols).
pub fn export_node_coefficients(
    tree: &Tree,
    node_id: NodeId,
    layout: (usize, usize),
    path: &Path,
) -> Result<()> {
    let (coeffs, _) = node_coefficients(tree, node_id)?;
    if coeffs.len() != layout.0 * layout.1 {
        return Err(Error::Shape(format!(
            "{} coefficients vs {}x{} layout",
            coeffs.len(),
            layout.0,
            layout.1
        )));
    }
    write_pgm(&coeffs, layout.0, layout.1, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VizDirection {
    Maximize,
    Minimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VizInit {
    Zeros,
    SeededNoise,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatVizConfig {
    pub direction: VizDirection,
    pub step_size: f64,
    pub iterations: usize,
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub init: VizInit,
    pub seed: u64,
}

impl Default for FeatVizConfig {
    fn default() -> Self {
        FeatVizConfig {
            direction: VizDirection::Maximize,
            step_size: 0.1,
            iterations: 256,
            lambda_l1: 1e-4,
            lambda_l2: 1e-3,
            init: VizInit::SeededNoise,
            seed: 0,
        }
    }
}

impl FeatVizConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.lambda_l1 < 0.0 || self.lambda_l2 < 0.0 {
            return Err(Error::Config("penalty weights must be non-negative".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config("step size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FeatVizResult {
    pub input: Vec<f64>,
    /// sigma(f_n(x_t)) per iteration, including the initial point.
    pub trace: Vec<f64>,
}

/// Gradient ascent on +/- sigma(f_n(x)) - l1*|x|_1 - l2*|x|_2^2 with a fixed
/// step size. Returns the optimized input and the activation trace; aborts
/// with the partial trace if the activation turns non-finite.
pub fn feature_visualization(
    tree: &Tree,
    node_id: NodeId,
    cfg: &FeatVizConfig,
) -> Result<FeatVizResult> {
    cfg.validate()?;
    let d = tree.flat_dim();
    let mut x = match cfg.init {
        VizInit::Zeros => vec![0.0; d],
        VizInit::SeededNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (0..d).map(|_| rng.gen_range(-0.01..0.01)).collect()
        }
    };
    let dir = match cfg.direction {
        VizDirection::Maximize => 1.0,
        VizDirection::Minimize => -1.0,
    };
    let (sig0, _) = node_activation_with_input_grad(tree, node_id, &x)?;
    let mut trace = vec![sig0];
    for _ in 0..cfg.iterations {
        let (_, grad) = node_activation_with_input_grad(tree, node_id, &x)?;
        for (xi, gi) in x.iter_mut().zip(&grad) {
            let sign = if *xi > 0.0 {
                1.0
            } else if *xi < 0.0 {
                -1.0
            } else {
                0.0
            };
            let ascent = dir * gi - cfg.lambda_l1 * sign - 2.0 * cfg.lambda_l2 * *xi;
            *xi += cfg.step_size * ascent;
        }
        let (sig, _) = node_activation_with_input_grad(tree, node_id, &x)?;
        if !sig.is_finite() {
            return Err(Error::Numeric(format!(
                "activation became non-finite after {} iterations; partial trace: {:?}",
                trace.len(),
                &trace[..trace.len().min(8)]
            )));
        }
        trace.push(sig);
    }
    Ok(FeatVizResult { input: x, trace })
}
