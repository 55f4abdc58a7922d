//! Task losses, the two leaf-distribution penalties, per-leaf losses, and
//! the combined training objective.
//!
//! The split penalty pushes the per-leaf sample mass toward the uniform
//! distribution (all leaves used). The sample penalty carries the opposite
//! sign by design: minimizing it pushes each sample's leaf-weight row away
//! from uniform, concentrating every prediction on few leaves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::tree::{forward_cache, LeafWeights, Task, Tree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLoss {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPenaltyVariant {
    CrossEntropy,
    SquaredDifference,
}

/// Training targets: class indices for classification, value vectors for
/// regression.
#[derive(Clone, Debug)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gather(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => {
                let mut out = Matrix::zeros(idx.len(), v.cols());
                for (row, &i) in idx.iter().enumerate() {
                    out.row_mut(row).copy_from_slice(v.row(i));
                }
                Targets::Values(out)
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub task_loss: TaskLoss,
    pub split_variant: SplitPenaltyVariant,
    pub alpha_u: f64,
    pub alpha_s: f64,
    /// Probability floor applied inside every logarithm.
    pub epsilon: f64,
}

impl ObjectiveConfig {
    pub fn for_task(task: Task) -> ObjectiveConfig {
        ObjectiveConfig {
            task_loss: match task {
                Task::Classification => TaskLoss::SoftmaxCrossEntropy,
                Task::Regression => TaskLoss::MeanSquaredError,
            },
            split_variant: SplitPenaltyVariant::CrossEntropy,
            alpha_u: 0.0,
            alpha_s: 0.0,
            epsilon: 1e-7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha_u < 0.0 || self.alpha_s < 0.0 {
            return Err(Error::Config("penalty scales must be non-negative".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-term view of the combined objective.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub split: f64,
    pub sample: f64,
    pub total: f64,
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

/// Loss of one output row: cross-entropy of the softmax readout, or the
/// per-row mean squared error.
pub(crate) fn per_sample_loss(output: &[f64], target_class: Option<usize>, target_values: Option<&[f64]>, loss: TaskLoss) -> f64 {
    match loss {
        TaskLoss::SoftmaxCrossEntropy => {
            let y = target_class.expect("class target");
            log_sum_exp(output) - output[y]
        }
        TaskLoss::MeanSquaredError => {
            let y = target_values.expect("value target");
            let k = output.len() as f64;
            output
                .iter()
                .zip(y)
                .map(|(&o, &t)| (o - t) * (o - t))
                .sum::<f64>()
                / k
        }
    }
}

fn check_targets(outputs: &Matrix, targets: &Targets, loss: TaskLoss) -> Result<()> {
    if targets.len() != outputs.rows() {
        return Err(Error::Shape(format!(
            "{} outputs vs {} targets",
            outputs.rows(),
            targets.len()
        )));
    }
    match (targets, loss) {
        (Targets::Classes(classes), TaskLoss::SoftmaxCrossEntropy) => {
            if let Some(&bad) = classes.iter().find(|&&c| c >= outputs.cols()) {
                return Err(Error::Data(format!(
                    "class index {bad} out of range for {} outputs",
                    outputs.cols()
                )));
            }
        }
        (Targets::Values(v), TaskLoss::MeanSquaredError) => {
            if v.cols() != outputs.cols() {
                return Err(Error::Shape(format!(
                    "target width {} vs output width {}",
                    v.cols(),
                    outputs.cols()
                )));
            }
        }
        _ => {
            return Err(Error::Config(
                "target kind does not match the task loss".into(),
            ));
        }
    }
    Ok(())
}

/// Mean task loss over the batch.
pub fn task_loss(outputs: &Matrix, targets: &Targets, loss: TaskLoss) -> Result<f64> {
    if outputs.rows() == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    check_targets(outputs, targets, loss)?;
    let n = outputs.rows();
    let mut acc = 0.0;
    for i in 0..n {
        let row = outputs.row(i);
        acc += match targets {
            Targets::Classes(c) => per_sample_loss(row, Some(c[i]), None, loss),
            Targets::Values(v) => per_sample_loss(row, None, Some(v.row(i)), loss),
        };
    }
    Ok(acc / n as f64)
}

/// Mean task loss plus its gradient with respect to the outputs.
pub(crate) fn task_loss_and_grad(
    outputs: &Matrix,
    targets: &Targets,
    loss: TaskLoss,
) -> Result<(f64, Matrix)> {
    if outputs.rows() == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    check_targets(outputs, targets, loss)?;
    let (n, k) = (outputs.rows(), outputs.cols());
    let mut grad = Matrix::zeros(n, k);
    let mut acc = 0.0;
    match (targets, loss) {
        (Targets::Classes(classes), TaskLoss::SoftmaxCrossEntropy) => {
            for i in 0..n {
                let row = outputs.row(i);
                let lse = log_sum_exp(row);
                acc += lse - row[classes[i]];
                let g = grad.row_mut(i);
                for c in 0..k {
                    g[c] = (row[c] - lse).exp() / n as f64;
                }
                g[classes[i]] -= 1.0 / n as f64;
            }
        }
        (Targets::Values(values), TaskLoss::MeanSquaredError) => {
            let scale = 1.0 / (n as f64 * k as f64);
            for i in 0..n {
                let row = outputs.row(i);
                let y = values.row(i);
                let g = grad.row_mut(i);
                for c in 0..k {
                    let r = row[c] - y[c];
                    acc += r * r / k as f64;
                    g[c] = 2.0 * r * scale;
                }
            }
        }
        _ => unreachable!("checked above"),
    }
    Ok((acc / n as f64, grad))
}

fn clamp_prob(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

/// Penalty on the normalized leaf-mass distribution P = S / sum(S).
/// Cross-entropy variant: -sum_l [(1/L) log P_l + (1 - 1/L) log(1 - P_l)],
/// squared variant: sum_l (P_l - 1/L)^2. Minimized when P is uniform.
pub fn split_penalty(
    weights: &LeafWeights,
    variant: SplitPenaltyVariant,
    epsilon: f64,
) -> Result<f64> {
    let num_leaves = weights.num_leaves();
    if num_leaves == 0 {
        return Err(Error::Data("empty leaf set".into()));
    }
    let total: f64 = weights.col_sums.iter().sum();
    if total <= 0.0 {
        return Err(Error::Data("leaf weights carry no mass".into()));
    }
    let uniform = 1.0 / num_leaves as f64;
    let mut acc = 0.0;
    for &s in &weights.col_sums {
        let p = s / total;
        match variant {
            SplitPenaltyVariant::CrossEntropy => {
                let p = clamp_prob(p, epsilon);
                acc -= uniform * p.ln() + (1.0 - uniform) * (1.0 - p).ln();
            }
            SplitPenaltyVariant::SquaredDifference => {
                acc += (p - uniform) * (p - uniform);
            }
        }
    }
    Ok(acc)
}

/// d(split_penalty)/d(S_l). The quotient rule through P_l = S_l / sum(S)
/// is applied in full, and the clamp zeroes the derivative outside
/// (epsilon, 1 - epsilon).
pub(crate) fn split_penalty_grad_wrt_mass(
    weights: &LeafWeights,
    variant: SplitPenaltyVariant,
    epsilon: f64,
) -> Result<Vec<f64>> {
    let num_leaves = weights.num_leaves();
    if num_leaves == 0 {
        return Err(Error::Data("empty leaf set".into()));
    }
    let total: f64 = weights.col_sums.iter().sum();
    if total <= 0.0 {
        return Err(Error::Data("leaf weights carry no mass".into()));
    }
    let uniform = 1.0 / num_leaves as f64;
    let p_raw: Vec<f64> = weights.col_sums.iter().map(|&s| s / total).collect();
    let dldp: Vec<f64> = p_raw
        .iter()
        .map(|&p| match variant {
            SplitPenaltyVariant::CrossEntropy => {
                if p <= epsilon || p >= 1.0 - epsilon {
                    0.0
                } else {
                    -(uniform / p - (1.0 - uniform) / (1.0 - p))
                }
            }
            SplitPenaltyVariant::SquaredDifference => 2.0 * (p - uniform),
        })
        .collect();
    let weighted: f64 = dldp.iter().zip(&p_raw).map(|(&g, &p)| g * p).sum();
    Ok(dldp.iter().map(|&g| (g - weighted) / total).collect())
}

/// Penalty on each sample's leaf-weight row; positive sign (the opposite of
/// the split penalty) so minimizing it drives rows away from uniform.
pub fn sample_penalty(weights: &LeafWeights, epsilon: f64) -> Result<f64> {
    let n = weights.weights.rows();
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let num_leaves = weights.num_leaves();
    if num_leaves == 0 {
        return Err(Error::Data("empty leaf set".into()));
    }
    let uniform = 1.0 / num_leaves as f64;
    let mut acc = 0.0;
    for &w in weights.weights.data() {
        let q = clamp_prob(w, epsilon);
        acc += uniform * q.ln() + (1.0 - uniform) * (1.0 - q).ln();
    }
    Ok(acc / n as f64)
}

/// d(sample_penalty)/d(w_il), elementwise.
pub(crate) fn sample_penalty_grad(weights: &LeafWeights, epsilon: f64) -> Result<Matrix> {
    let n = weights.weights.rows();
    if n == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let uniform = 1.0 / weights.num_leaves() as f64;
    let mut grad = Matrix::zeros(n, weights.num_leaves());
    for (g, &w) in grad.data_mut().iter_mut().zip(weights.weights.data()) {
        *g = if w <= epsilon || w >= 1.0 - epsilon {
            0.0
        } else {
            (uniform / w - (1.0 - uniform) / (1.0 - w)) / n as f64
        };
    }
    Ok(grad)
}

fn check_task_consistency(tree: &Tree, cfg: &ObjectiveConfig) -> Result<()> {
    let ok = matches!(
        (tree.task(), cfg.task_loss),
        (Task::Classification, TaskLoss::SoftmaxCrossEntropy)
            | (Task::Regression, TaskLoss::MeanSquaredError)
    );
    if !ok {
        return Err(Error::Config(
            "objective task loss does not match the tree's task".into(),
        ));
    }
    Ok(())
}

/// Combined objective with optional per-sample output scaling and additive
/// frozen context (used when training a subtree in place of a leaf).
pub(crate) fn total_loss_with_mode(
    tree: &Tree,
    batch: &Matrix,
    targets: &Targets,
    cfg: &ObjectiveConfig,
    scale: Option<&[f64]>,
    context: Option<&Matrix>,
) -> Result<(f64, LossBreakdown)> {
    cfg.validate()?;
    check_task_consistency(tree, cfg)?;
    let cache = forward_cache(tree, batch, false)?;
    let combined = combine_output(&cache.phi, scale, context)?;
    let task = task_loss(&combined, targets, cfg.task_loss)?;
    let split = split_penalty(&cache.weights, cfg.split_variant, cfg.epsilon)?;
    let sample = sample_penalty(&cache.weights, cfg.epsilon)?;
    let total = task + cfg.alpha_u * split + cfg.alpha_s * sample;
    Ok((
        total,
        LossBreakdown {
            task,
            split,
            sample,
            total,
        },
    ))
}

pub(crate) fn combine_output(
    phi: &Matrix,
    scale: Option<&[f64]>,
    context: Option<&Matrix>,
) -> Result<Matrix> {
    let mut out = phi.clone();
    if let Some(s) = scale {
        if s.len() != phi.rows() {
            return Err(Error::Shape(format!(
                "scale length {} vs {} rows",
                s.len(),
                phi.rows()
            )));
        }
        for i in 0..out.rows() {
            let w = s[i];
            for v in out.row_mut(i) {
                *v *= w;
            }
        }
    }
    if let Some(ctx) = context {
        if ctx.rows() != phi.rows() || ctx.cols() != phi.cols() {
            return Err(Error::Shape(format!(
                "context {}x{} vs output {}x{}",
                ctx.rows(),
                ctx.cols(),
                phi.rows(),
                phi.cols()
            )));
        }
        for (o, c) in out.data_mut().iter_mut().zip(ctx.data()) {
            *o += c;
        }
    }
    Ok(out)
}

/// task_loss + alpha_U * split_penalty + alpha_S * sample_penalty, with the
/// per-term breakdown for logging.
pub fn total_loss(
    tree: &Tree,
    batch: &Matrix,
    targets: &Targets,
    cfg: &ObjectiveConfig,
) -> Result<(f64, LossBreakdown)> {
    total_loss_with_mode(tree, batch, targets, cfg, None, None)
}

/// Soft leaf losses L_l = sum_j w_lj * loss(g_l(x_j), y_j), where the loss
/// is applied to each leaf's own output. Deliberately unnormalized by the
/// leaf mass.
pub fn leaf_losses(
    tree: &Tree,
    weights: &LeafWeights,
    batch: &Matrix,
    targets: &Targets,
) -> Result<Vec<f64>> {
    if weights.weights.rows() != batch.rows() {
        return Err(Error::Shape(format!(
            "{} weight rows vs {} batch rows",
            weights.weights.rows(),
            batch.rows()
        )));
    }
    if targets.len() != batch.rows() {
        return Err(Error::Shape(format!(
            "{} batch rows vs {} targets",
            batch.rows(),
            targets.len()
        )));
    }
    let loss_kind = match tree.task() {
        Task::Classification => TaskLoss::SoftmaxCrossEntropy,
        Task::Regression => TaskLoss::MeanSquaredError,
    };
    let k = tree.output_dim();
    let mut out = vec![0.0; weights.num_leaves()];
    let mut g = vec![0.0; k];
    for (col, &leaf_id) in weights.leaf_ids.iter().enumerate() {
        let leaf = tree
            .leaf(leaf_id)
            .ok_or_else(|| Error::Config(format!("leaf {leaf_id} not in tree")))?;
        let mut acc = 0.0;
        for j in 0..batch.rows() {
            leaf.eval_into(batch.row(j), &mut g);
            let l = match targets {
                Targets::Classes(c) => per_sample_loss(&g, Some(c[j]), None, loss_kind),
                Targets::Values(v) => per_sample_loss(&g, None, Some(v.row(j)), loss_kind),
            };
            acc += weights.weights.row(j)[col] * l;
        }
        out[col] = acc;
    }
    Ok(out)
}
