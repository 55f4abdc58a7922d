//! Incremental tree growth: pick the leaf with the largest soft leaf-loss,
//! train a warm-started depth-1 subtree against the frozen rest of the tree,
//! insert it, and periodically refit the whole tree.

use std::collections::HashSet;
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::objective::{leaf_losses, ObjectiveConfig};
use crate::trainer::{train, train_subtree, DataRef, TrainConfig};
use crate::tree::{forward_cache, LeafWeights, NodeId, Tree};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowConfig {
    /// Number of leaves to add.
    pub max_iters: usize,
    /// Refit the whole tree after every `retrain_steps` insertions.
    pub retrain_steps: usize,
    /// Minimum soft leaf mass for a leaf to be splittable. `None` uses half
    /// the average leaf mass, evaluated at selection time.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_min: Option<f64>,
    pub subtree_train: TrainConfig,
    pub full_train: TrainConfig,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_path: Option<PathBuf>,
}

impl GrowConfig {
    /// Defaults derived from a full-tree training configuration: the same
    /// settings for subtree training, and a refit budget of 20% of the
    /// original epochs.
    pub fn from_train(train_cfg: &TrainConfig) -> GrowConfig {
        let mut subtree_train = train_cfg.clone();
        subtree_train.log_path = None;
        let mut full_train = train_cfg.clone();
        full_train.max_epochs = (train_cfg.max_epochs / 5).max(1);
        full_train.log_path = None;
        GrowConfig {
            max_iters: 8,
            retrain_steps: 4,
            w_min: None,
            subtree_train,
            full_train,
            seed: 0,
            log_path: None,
        }
    }

    /// The leaf-addition schedule by starting depth: 4 adds 8; 5 and 6 add
    /// 16; 7 through 10 add 32.
    pub fn default_max_iters(start_depth: usize) -> usize {
        match start_depth {
            0..=4 => 8,
            5 | 6 => 16,
            _ => 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if self.retrain_steps == 0 {
            return Err(Error::Config("retrain_steps must be >= 1".into()));
        }
        if let Some(w) = self.w_min {
            if w < 0.0 {
                return Err(Error::Config("w_min must be non-negative".into()));
            }
        }
        self.subtree_train.validate()?;
        self.full_train.validate()
    }
}

/// One insertion performed by [`deep_tree`].
#[derive(Clone, Debug, Serialize)]
pub struct GrowthRecord {
    pub iteration: usize,
    pub leaf_id: u32,
    pub pre_val_loss: f64,
    pub post_val_loss: f64,
    pub leaves_after: usize,
    pub refit: bool,
}

#[derive(Clone, Debug, Serialize, Default)]
pub struct GrowthReport {
    pub insertions: Vec<GrowthRecord>,
    pub skipped_leaves: Vec<u32>,
}

/// Leaf with the largest leaf-loss among those whose soft mass is at least
/// `w_min`; `None` when no leaf is eligible. Ties break toward the lowest id.
pub fn best_split_leaf(
    weights: &LeafWeights,
    losses: &[f64],
    w_min: f64,
) -> Result<Option<NodeId>> {
    if losses.len() != weights.num_leaves() {
        return Err(Error::Shape(format!(
            "{} losses vs {} leaves",
            losses.len(),
            weights.num_leaves()
        )));
    }
    let mut best: Option<(NodeId, f64)> = None;
    for (col, &id) in weights.leaf_ids.iter().enumerate() {
        if weights.col_sums[col] < w_min {
            continue;
        }
        let l = losses[col];
        let better = match best {
            None => true,
            Some((bid, bl)) => l > bl || (l == bl && id < bid),
        };
        if better {
            best = Some((id, l));
        }
    }
    Ok(best.map(|(id, _)| id))
}

/// The warm-started depth-1 subtree for a leaf, plus the quantities needed
/// to train it in place: the leaf's weight column and the frozen context.
pub struct SubtreeSetup {
    pub subtree: Tree,
    pub leaf_weight: Vec<f64>,
    pub frozen_context: Matrix,
}

/// Builds the subtree that will replace `leaf_id`: both new leaves copy the
/// replaced leaf (identity-split warm start) while the new inner node uses
/// the standard random initializer. The frozen context is computed by the
/// algebraic identity: full output minus the leaf's weighted contribution.
pub fn subtree_setup(tree: &Tree, leaf_id: NodeId, batch: &Matrix, seed: u64) -> Result<SubtreeSetup> {
    let leaf = tree
        .leaf(leaf_id)
        .ok_or_else(|| Error::Config(format!("unknown leaf {leaf_id}")))?;
    let cache = forward_cache(tree, batch, false)?;
    let col = cache
        .weights
        .column_of(leaf_id)
        .expect("leaf present in weights");
    let n = batch.rows();
    let k = tree.output_dim();

    let leaf_weight: Vec<f64> = (0..n).map(|i| cache.weights.weights.row(i)[col]).collect();
    let mut frozen_context = cache.phi.clone();
    for i in 0..n {
        let w = leaf_weight[i];
        let g = cache.leaf_outputs[col].row(i);
        let row = frozen_context.row_mut(i);
        for c in 0..k {
            row[c] -= w * g[c];
        }
    }

    let mut subtree = Tree::build_full(1, tree.spec().clone(), k, tree.task(), seed)?;
    for id in subtree.leaf_ids().collect::<Vec<_>>() {
        let sub_leaf = subtree.leaf_mut(id).expect("listed id");
        sub_leaf.weights = leaf.weights.clone();
        sub_leaf.bias = leaf.bias.clone();
    }
    Ok(SubtreeSetup {
        subtree,
        leaf_weight,
        frozen_context,
    })
}

/// Builds and trains the replacement subtree for `leaf_id`.
pub fn create_train_subtree(
    tree: &Tree,
    leaf_id: NodeId,
    data: DataRef,
    obj: &ObjectiveConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Tree> {
    let mut setup = subtree_setup(tree, leaf_id, data.features, seed)?;
    train_subtree(
        &mut setup.subtree,
        data,
        &setup.leaf_weight,
        &setup.frozen_context,
        obj,
        cfg,
    )?;
    Ok(setup.subtree)
}

fn validation_loss(tree: &Tree, data: DataRef, obj: &ObjectiveConfig) -> Result<f64> {
    let (total, _) = crate::objective::total_loss(tree, data.features, data.targets, obj)?;
    Ok(total)
}

/// The growth loop: recompute leaf weights and losses, pick the best
/// eligible leaf, train its replacement subtree against the frozen context,
/// insert it, and refit the whole tree every `retrain_steps` insertions.
/// Stops after `max_iters` insertions or when no leaf is eligible.
pub fn deep_tree(
    tree: &mut Tree,
    train_data: DataRef,
    val_data: DataRef,
    grow: &GrowConfig,
    obj: &ObjectiveConfig,
) -> Result<GrowthReport> {
    grow.validate()?;
    obj.validate()?;
    let mut report = GrowthReport::default();
    let mut ineligible: HashSet<NodeId> = HashSet::new();
    let mut log_file = match &grow.log_path {
        Some(path) => Some(std::fs::File::create(path)?),
        None => None,
    };

    let n = train_data.features.rows() as f64;
    let mut it = 0usize;
    while it < grow.max_iters {
        let weights = crate::tree::leaf_weights(tree, train_data.features)?;
        let losses = leaf_losses(tree, &weights, train_data.features, train_data.targets)?;
        let w_min = grow
            .w_min
            .unwrap_or_else(|| 0.5 * n / weights.num_leaves() as f64);

        let mut masked_losses = losses.clone();
        for (col, id) in weights.leaf_ids.iter().enumerate() {
            if ineligible.contains(id) {
                masked_losses[col] = f64::NEG_INFINITY;
            }
        }
        let eligible = weights
            .leaf_ids
            .iter()
            .enumerate()
            .any(|(col, id)| weights.col_sums[col] >= w_min && !ineligible.contains(id));
        if !eligible {
            break;
        }
        let Some(leaf_id) = best_split_leaf(&weights, &masked_losses, w_min)? else {
            break;
        };

        it += 1;
        let pre_val = validation_loss(tree, val_data, obj)?;
        let subtree_seed = grow.seed.wrapping_add(it as u64);
        let subtree = match create_train_subtree(
            tree,
            leaf_id,
            train_data,
            obj,
            &grow.subtree_train,
            subtree_seed,
        ) {
            Ok(s) => s,
            Err(Error::Numeric(_)) => {
                // Subtree training diverged: skip this leaf for the rest of
                // the run.
                ineligible.insert(leaf_id);
                report.skipped_leaves.push(leaf_id.0);
                continue;
            }
            Err(e) => return Err(e),
        };
        tree.insert_subtree(leaf_id, &subtree)?;

        let mut refit = false;
        if report.insertions.len() % grow.retrain_steps == grow.retrain_steps - 1 {
            let mut cfg = grow.full_train.clone();
            cfg.seed = grow.seed.wrapping_add(0x5eed).wrapping_add(it as u64);
            train(tree, train_data, Some(val_data), obj, &cfg)?;
            refit = true;
        }
        let post_val = validation_loss(tree, val_data, obj)?;
        let record = GrowthRecord {
            iteration: it,
            leaf_id: leaf_id.0,
            pre_val_loss: pre_val,
            post_val_loss: post_val,
            leaves_after: tree.num_leaves(),
            refit,
        };
        if let Some(f) = &mut log_file {
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        report.insertions.push(record);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::Targets;
    use crate::tree::{forward, NodeSpec, Task};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn lw_from_rows(rows: Vec<Vec<f64>>) -> LeafWeights {
        let n = rows.len();
        let l = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let weights = Matrix::new(n, l, flat).unwrap();
        let col_sums = (0..l)
            .map(|c| (0..n).map(|i| weights.row(i)[c]).sum())
            .collect();
        LeafWeights {
            leaf_ids: (0..l as u32).map(NodeId).collect(),
            weights,
            col_sums,
        }
    }

    #[test]
    fn empty_eligible_set_returns_none() {
        let lw = lw_from_rows(vec![vec![0.2, 0.3, 0.5]]);
        let pick = best_split_leaf(&lw, &[1.0, 2.0, 3.0], 10.0).unwrap();
        assert!(pick.is_none());
    }

    #[test]
    fn argmax_leaf_selected() {
        let lw = lw_from_rows(vec![vec![0.3, 0.3, 0.4], vec![0.3, 0.4, 0.3]]);
        let pick = best_split_leaf(&lw, &[1.0, 5.0, 2.0], 0.0).unwrap();
        assert_eq!(pick, Some(NodeId(1)));
    }

    #[test]
    fn selection_matches_filter_then_argmax_oracle() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let l = rng.gen_range(2..6);
            let n = rng.gen_range(1..5);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let mut r: Vec<f64> = (0..l).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = r.iter().sum();
                    r.iter_mut().for_each(|v| *v /= s);
                    r
                })
                .collect();
            let lw = lw_from_rows(rows);
            let losses: Vec<f64> = (0..l).map(|_| rng.gen_range(0.0..5.0)).collect();
            let w_min = rng.gen_range(0.0..1.0);
            let got = best_split_leaf(&lw, &losses, w_min).unwrap();

            let expect = (0..l)
                .filter(|&c| lw.col_sums[c] >= w_min)
                .max_by(|&a, &b| {
                    losses[a]
                        .total_cmp(&losses[b])
                        .then(lw.leaf_ids[b].cmp(&lw.leaf_ids[a]))
                })
                .map(|c| lw.leaf_ids[c]);
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn best_split_never_returns_underweight_leaf() {
        let lw = lw_from_rows(vec![vec![0.9, 0.05, 0.05], vec![0.9, 0.05, 0.05]]);
        // Middle leaf has the largest loss but not enough mass.
        let pick = best_split_leaf(&lw, &[1.0, 100.0, 2.0], 0.5).unwrap();
        assert_eq!(pick, Some(NodeId(0)));
    }

    fn blob_data(n_per: usize, d: usize, seed: u64) -> (Matrix, Targets) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let class = i % 2;
            let center = if class == 0 { -1.5 } else { 1.5 };
            for _ in 0..d {
                rows.push(center + rng.gen_range(-1.0..1.0));
            }
            labels.push(class);
        }
        (
            Matrix::new(2 * n_per, d, rows).unwrap(),
            Targets::Classes(labels),
        )
    }

    #[test]
    fn frozen_context_matches_direct_sum_over_other_leaves() {
        let tree = Tree::build_full(
            3,
            NodeSpec::hyperplane(vec![4]),
            3,
            Task::Classification,
            19,
        )
        .unwrap();
        let mut rng = StdRng::seed_from_u64(6);
        let batch = Matrix::new(
            6,
            4,
            (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let leaf_id = tree.leaf_order()[2];
        let setup = subtree_setup(&tree, leaf_id, &batch, 1).unwrap();

        // Direct evaluation of the sum over all leaves except the split one.
        let lw = crate::tree::leaf_weights(&tree, &batch).unwrap();
        for i in 0..batch.rows() {
            let mut expect = vec![0.0; 3];
            for (col, &id) in lw.leaf_ids.iter().enumerate() {
                if id == leaf_id {
                    continue;
                }
                let leaf = tree.leaf(id).unwrap();
                let mut g = vec![0.0; 3];
                leaf.eval_into(batch.row(i), &mut g);
                for c in 0..3 {
                    expect[c] += lw.weights.row(i)[col] * g[c];
                }
            }
            for c in 0..3 {
                assert!((setup.frozen_context.row(i)[c] - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn untrained_warm_start_insert_keeps_outputs() {
        let tree = Tree::build_full(
            2,
            NodeSpec::hyperplane(vec![3]),
            2,
            Task::Classification,
            23,
        )
        .unwrap();
        let mut rng = StdRng::seed_from_u64(9);
        let batch = Matrix::new(
            5,
            3,
            (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (phi0, _) = forward(&tree, &batch).unwrap();

        let leaf_id = tree.leaf_order()[1];
        let setup = subtree_setup(&tree, leaf_id, &batch, 7).unwrap();
        let mut grown = tree.clone();
        grown.insert_subtree(leaf_id, &setup.subtree).unwrap();
        let (phi1, _) = forward(&grown, &batch).unwrap();
        for (a, b) in phi0.data().iter().zip(phi1.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn warm_start_loss_equals_pre_split_loss() {
        let tree = Tree::build_full(
            2,
            NodeSpec::hyperplane(vec![3]),
            2,
            Task::Classification,
            29,
        )
        .unwrap();
        let (x, y) = blob_data(10, 3, 2);
        let obj = ObjectiveConfig::for_task(Task::Classification);
        let (pre, _) = crate::objective::total_loss(&tree, &x, &y, &obj).unwrap();
        let leaf_id = tree.leaf_order()[0];
        let setup = subtree_setup(&tree, leaf_id, &x, 3).unwrap();
        let (combined, _) = crate::trainer::subtree_loss(
            &setup.subtree,
            DataRef {
                features: &x,
                targets: &y,
            },
            &setup.leaf_weight,
            &setup.frozen_context,
            &obj,
        )
        .unwrap();
        assert!((combined - pre).abs() < 1e-9);
    }

    #[test]
    fn subtree_training_does_not_worsen_training_loss() {
        let tree = Tree::build_full(
            2,
            NodeSpec::hyperplane(vec![4]),
            2,
            Task::Classification,
            37,
        )
        .unwrap();
        let (x, y) = blob_data(30, 4, 5);
        let obj = ObjectiveConfig::for_task(Task::Classification);
        let data = DataRef {
            features: &x,
            targets: &y,
        };
        let leaf_id = tree.leaf_order()[0];
        let mut setup = subtree_setup(&tree, leaf_id, &x, 11).unwrap();
        let (initial, _) = crate::trainer::subtree_loss(
            &setup.subtree,
            data,
            &setup.leaf_weight,
            &setup.frozen_context,
            &obj,
        )
        .unwrap();
        let cfg = TrainConfig {
            max_epochs: 10,
            batch_size: 16,
            dropout: 0.0,
            learning_rate: 0.01,
            seed: 4,
            ..TrainConfig::default()
        };
        train_subtree(
            &mut setup.subtree,
            data,
            &setup.leaf_weight,
            &setup.frozen_context,
            &obj,
            &cfg,
        )
        .unwrap();
        let (after, _) = crate::trainer::subtree_loss(
            &setup.subtree,
            data,
            &setup.leaf_weight,
            &setup.frozen_context,
            &obj,
        )
        .unwrap();
        assert!(after <= initial + 1e-9, "{after} vs {initial}");
    }

    #[test]
    fn huge_w_min_growth_is_a_no_op() {
        let mut tree = Tree::build_full(
            2,
            NodeSpec::hyperplane(vec![3]),
            2,
            Task::Classification,
            43,
        )
        .unwrap();
        let before = tree.num_leaves();
        let (x, y) = blob_data(10, 3, 7);
        let (vx, vy) = blob_data(5, 3, 8);
        let cfg = TrainConfig {
            max_epochs: 2,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let mut grow = GrowConfig::from_train(&cfg);
        grow.w_min = Some(1e12);
        let report = deep_tree(
            &mut tree,
            DataRef {
                features: &x,
                targets: &y,
            },
            DataRef {
                features: &vx,
                targets: &vy,
            },
            &grow,
            &ObjectiveConfig::for_task(Task::Classification),
        )
        .unwrap();
        assert!(report.insertions.is_empty());
        assert_eq!(tree.num_leaves(), before);
    }

    #[test]
    fn growth_adds_exactly_requested_leaves() {
        let mut tree = Tree::build_full(
            2,
            NodeSpec::hyperplane(vec![4]),
            2,
            Task::Classification,
            47,
        )
        .unwrap();
        let (x, y) = blob_data(40, 4, 9);
        let (vx, vy) = blob_data(10, 4, 10);
        let cfg = TrainConfig {
            max_epochs: 3,
            batch_size: 16,
            dropout: 0.0,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut grow = GrowConfig::from_train(&cfg);
        grow.max_iters = 3;
        grow.w_min = Some(0.0);
        let before = tree.num_leaves();
        let report = deep_tree(
            &mut tree,
            DataRef {
                features: &x,
                targets: &y,
            },
            DataRef {
                features: &vx,
                targets: &vy,
            },
            &grow,
            &ObjectiveConfig::for_task(Task::Classification),
        )
        .unwrap();
        assert_eq!(report.insertions.len(), 3);
        assert_eq!(tree.num_leaves(), before + 3);
        // Each recorded leaf must have existed at its iteration; ids are
        // unique because a split leaf is removed from the tree.
        let mut seen = HashSet::new();
        for rec in &report.insertions {
            assert!(seen.insert(rec.leaf_id));
        }
        tree.validate().unwrap();
    }

    #[test]
    fn table_schedule_by_depth() {
        assert_eq!(GrowConfig::default_max_iters(4), 8);
        assert_eq!(GrowConfig::default_max_iters(5), 16);
        assert_eq!(GrowConfig::default_max_iters(6), 16);
        assert_eq!(GrowConfig::default_max_iters(7), 32);
        assert_eq!(GrowConfig::default_max_iters(10), 32);
    }
}
