//! Subcommand implementations. Every command writes its artifacts under the
//! output directory and is deterministic for a fixed config and seed.

use std::fs;
use std::path::Path;

use serde_json::json;

use gstree::analysis::{
    self, accuracy, auc, feature_visualization, k_alpha_fraction, FeatVizConfig, FractionSpec,
    VizDirection,
};
use gstree::dataio::{self, normalize, write_metrics_json, Dataset, NormStats, Provenance};
use gstree::error::{Error, Result};
use gstree::grower::{deep_tree, GrowConfig};
use gstree::numerics::Matrix;
use gstree::objective::{ObjectiveConfig, Targets};
use gstree::trainer::{gradient_check, train, DataRef, TrainConfig};
use gstree::tree::{predict, NodeId, NodeSpec, Prediction, Task, Tree};

use crate::config::{
    config_digest, GradCheckCase, GradCheckConfig, GrowRunConfig, TrainRunConfig,
};

fn ensure_out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out)
        .map_err(|e| Error::Config(format!("cannot create output dir {}: {e}", out.display())))
}

fn class_count(ds: &Dataset) -> Result<usize> {
    ds.num_classes()
        .ok_or_else(|| Error::Data("classification requires class targets".into()))
}

fn eval_metrics(tree: &Tree, ds: &Dataset) -> Result<Vec<(&'static str, serde_json::Value)>> {
    let mut entries: Vec<(&'static str, serde_json::Value)> = Vec::new();
    match (tree.task(), &ds.targets) {
        (Task::Classification, Targets::Classes(labels)) => {
            let Prediction::Labels(preds) = predict(tree, &ds.features)? else {
                unreachable!("classification tree");
            };
            let acc = accuracy(&preds, labels)?;
            entries.push(("accuracy", json!(acc)));
            let k = tree.output_dim();
            let mut confusion = vec![vec![0u64; k]; k];
            for (&p, &l) in preds.iter().zip(labels) {
                confusion[l][p] += 1;
            }
            entries.push(("confusion", json!(confusion)));
            if k == 2 {
                // Positive-class score: logit margin for class 1.
                let (phi, _) = gstree::tree::forward(tree, &ds.features)?;
                let scores: Vec<f64> = (0..phi.rows())
                    .map(|i| phi.row(i)[1] - phi.row(i)[0])
                    .collect();
                let flags: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
                match auc(&scores, &flags) {
                    Ok(a) => entries.push(("auc", json!(a))),
                    Err(e) => entries.push(("auc_omitted_reason", json!(e.to_string()))),
                }
            } else {
                entries.push((
                    "auc_omitted_reason",
                    json!("AUC reported for binary tasks only"),
                ));
            }
        }
        (Task::Regression, Targets::Values(values)) => {
            let (phi, _) = gstree::tree::forward(tree, &ds.features)?;
            let mut sse = 0.0;
            for i in 0..phi.rows() {
                for (o, t) in phi.row(i).iter().zip(values.row(i)) {
                    sse += (o - t) * (o - t);
                }
            }
            let mse = sse / (phi.rows() * phi.cols()) as f64;
            entries.push(("mse", json!(mse)));
        }
        _ => return Err(Error::Data("target kind does not match the model task".into())),
    }
    entries.push(("samples", json!(ds.len())));
    Ok(entries)
}

fn apply_stats_if_any(ds: &mut Dataset, stats: &Option<NormStats>) -> Result<()> {
    if let Some(s) = stats {
        dataio::apply_normalization(ds, s)?;
    }
    Ok(())
}

pub fn cmd_train(config_path: &Path, out: &Path, seed_override: Option<u64>) -> Result<()> {
    let mut cfg: TrainRunConfig = crate::config::read_config(config_path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    let digest = config_digest(&cfg)?;
    ensure_out_dir(out)?;

    let loaded = cfg.data.load_for_task(cfg.task, cfg.seed)?;
    let mut train_ds = loaded.train;
    let mut stats: Option<NormStats> = None;
    if let Some(method) = cfg.normalize {
        stats = Some(normalize(&mut train_ds, method)?);
    }

    let output_dim = match cfg.task {
        Task::Classification => class_count(&train_ds)?,
        Task::Regression => cfg.output_dim.unwrap_or(1),
    };
    let spec = cfg.model.node_spec(train_ds.input_shape.clone())?;
    let mut tree = Tree::build_full(cfg.model.depth, spec, output_dim, cfg.task, cfg.seed)?;

    let obj = cfg.objective.build(cfg.task);
    let mut train_cfg = cfg.train.clone();
    train_cfg.log_path = Some(out.join("train_log.jsonl"));
    let report = train(
        &mut tree,
        DataRef {
            features: &train_ds.features,
            targets: &train_ds.targets,
        },
        None,
        &obj,
        &train_cfg,
    )?;

    let provenance = Provenance {
        seed: cfg.seed,
        config_digest: digest,
    };
    dataio::save_model(&tree, stats.as_ref(), Some(&provenance), &out.join("model.json"))?;

    let mut entries = vec![
        ("best_val_loss", json!(report.best_val_loss)),
        ("best_epoch", json!(report.best_epoch)),
        ("epochs_run", json!(report.stopped_epoch)),
        ("wall_time_secs", json!(report.wall_time_secs)),
    ];
    if let Some(mut test) = loaded.test {
        apply_stats_if_any(&mut test, &stats)?;
        entries.extend(eval_metrics(&tree, &test)?);
    }
    write_metrics_json(&out.join("metrics.json"), &entries)?;
    Ok(())
}

pub fn cmd_grow(
    config_path: &Path,
    model_path: &Path,
    out: &Path,
    seed_override: Option<u64>,
) -> Result<()> {
    let mut cfg: GrowRunConfig = crate::config::read_config(config_path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    ensure_out_dir(out)?;

    let (mut tree, stats, _) = dataio::load_model(model_path)?;
    let loaded = cfg.data.load_for_task(tree.task(), cfg.seed)?;
    let mut train_ds = loaded.train;
    apply_stats_if_any(&mut train_ds, &stats)?;

    let obj = cfg.objective.build(tree.task());
    let mut grow_cfg = GrowConfig::from_train(&cfg.train);
    grow_cfg.max_iters = cfg
        .grow
        .max_iters
        .unwrap_or_else(|| GrowConfig::default_max_iters(tree.max_depth()));
    grow_cfg.retrain_steps = cfg.grow.retrain_steps;
    grow_cfg.w_min = cfg.grow.w_min;
    grow_cfg.full_train.max_epochs = ((cfg.train.max_epochs as f64
        * cfg.grow.refit_epoch_fraction)
        .round() as usize)
        .max(1);
    grow_cfg.seed = cfg.seed;
    grow_cfg.log_path = Some(out.join("growth_log.jsonl"));
    grow_cfg.validate()?;

    // Carve a validation split for growth decisions.
    let (train_split, val_split) =
        dataio::split_train_val(&train_ds, cfg.train.validation_fraction, cfg.seed, false)?;
    let report = deep_tree(
        &mut tree,
        DataRef {
            features: &train_split.features,
            targets: &train_split.targets,
        },
        DataRef {
            features: &val_split.features,
            targets: &val_split.targets,
        },
        &grow_cfg,
        &obj,
    )?;

    let digest = config_digest(&cfg)?;
    let provenance = Provenance {
        seed: cfg.seed,
        config_digest: digest,
    };
    dataio::save_model(&tree, stats.as_ref(), Some(&provenance), &out.join("model.json"))?;

    let mut entries = vec![
        ("insertions", json!(report.insertions.len())),
        ("leaves", json!(tree.num_leaves())),
        ("skipped_leaves", json!(report.skipped_leaves)),
    ];
    if let Some(mut test) = loaded.test {
        apply_stats_if_any(&mut test, &stats)?;
        entries.extend(eval_metrics(&tree, &test)?);
    }
    write_metrics_json(&out.join("metrics.json"), &entries)?;
    Ok(())
}

pub struct EvalDataArgs<'a> {
    pub images: Option<&'a Path>,
    pub labels: Option<&'a Path>,
    pub csv: Option<&'a Path>,
    pub target: Option<&'a str>,
}

fn load_eval_data(args: &EvalDataArgs, task: Task) -> Result<Dataset> {
    match (args.images, args.labels, args.csv) {
        (Some(images), Some(labels), None) => dataio::load_idx(images, labels),
        (None, None, Some(csv)) => {
            let target = args
                .target
                .ok_or_else(|| Error::Config("--target is required with --data-csv".into()))?;
            dataio::load_csv(
                csv,
                &dataio::CsvSchema {
                    target: target.to_string(),
                    task,
                },
            )
        }
        _ => Err(Error::Config(
            "supply either --data-images with --data-labels, or --data-csv".into(),
        )),
    }
}

pub fn cmd_eval(model_path: &Path, data: &EvalDataArgs, out: &Path) -> Result<()> {
    let (tree, stats, _) = dataio::load_model(model_path)?;
    let mut ds = load_eval_data(data, tree.task())?;
    if ds.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    if ds.features.cols() != tree.flat_dim() {
        return Err(Error::Shape(format!(
            "data has {} features but model expects {}",
            ds.features.cols(),
            tree.flat_dim()
        )));
    }
    apply_stats_if_any(&mut ds, &stats)?;
    ensure_out_dir(out)?;
    let entries = eval_metrics(&tree, &ds)?;
    write_metrics_json(&out.join("metrics.json"), &entries)?;
    Ok(())
}

pub fn cmd_inspect(
    model_path: &Path,
    data: &EvalDataArgs,
    out: &Path,
    k: usize,
    alpha: f64,
) -> Result<()> {
    let (tree, stats, _) = dataio::load_model(model_path)?;
    ensure_out_dir(out)?;

    let summary = json!({
        "inner_nodes": tree.num_inner(),
        "leaves": tree.num_leaves(),
        "max_depth": tree.max_depth(),
        "input_shape": tree.input_shape(),
        "output_dim": tree.output_dim(),
    });
    fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    // Coefficient images for every node with a resolvable layout.
    let mut exported = 0usize;
    for id in tree.inner_ids().collect::<Vec<_>>() {
        match analysis::node_coefficients(&tree, id) {
            Ok((_, layout)) => {
                let path = out.join(format!("node_{id}.pgm"));
                analysis::export_node_coefficients(&tree, id, (layout[0], layout[1]), &path)?;
                exported += 1;
            }
            Err(Error::Config(_)) => continue,
            Err(e) => return Err(e),
        }
    }

    let mut entries = vec![
        ("nodes_exported", json!(exported)),
        ("k", json!(k)),
        ("alpha", json!(alpha)),
    ];
    if data.images.is_some() || data.csv.is_some() {
        let mut ds = load_eval_data(data, tree.task())?;
        apply_stats_if_any(&mut ds, &stats)?;
        let weights = gstree::tree::leaf_weights(&tree, &ds.features)?;
        let fraction = k_alpha_fraction(&weights, &FractionSpec { k, alpha })?;
        entries.push(("k_alpha_fraction", json!(fraction)));
        if let Targets::Classes(_) = &ds.targets {
            let dist = analysis::leaf_class_distribution(&tree, &ds.features, &ds.targets)?;
            fs::write(
                out.join("class_distribution.json"),
                serde_json::to_string_pretty(&serde_json::to_value(&dist)?)?,
            )?;
        }
    }
    write_metrics_json(&out.join("k_alpha.json"), &entries)?;
    Ok(())
}

pub fn cmd_featviz(
    model_path: &Path,
    node: u32,
    out: &Path,
    cfg: &FeatVizConfig,
) -> Result<()> {
    let (tree, _, _) = dataio::load_model(model_path)?;
    let node_id = NodeId(node);
    if tree.inner(node_id).is_none() {
        return Err(Error::Config(format!("unknown inner node {node}")));
    }
    cfg.validate()?;
    ensure_out_dir(out)?;

    let layout = match tree.input_shape() {
        [_, h, w] => (*h, *w),
        [d] => (1usize, *d),
        other => (1usize, other.iter().product()),
    };
    let mut traces = serde_json::Map::new();
    for (name, direction) in [
        ("maximize", VizDirection::Maximize),
        ("minimize", VizDirection::Minimize),
    ] {
        let mut dir_cfg = cfg.clone();
        dir_cfg.direction = direction;
        let result = feature_visualization(&tree, node_id, &dir_cfg)?;
        analysis::write_pgm(
            &result.input,
            layout.0,
            layout.1,
            &out.join(format!("node_{node}_{name}.pgm")),
        )?;
        traces.insert(name.to_string(), json!(result.trace));
    }
    fs::write(
        out.join(format!("node_{node}_trace.json")),
        serde_json::to_string_pretty(&serde_json::Value::Object(traces))?,
    )?;
    Ok(())
}

pub fn cmd_gradcheck(config_path: Option<&Path>, tolerance_override: Option<f64>) -> Result<bool> {
    let mut cfg: GradCheckConfig = match config_path {
        Some(p) => crate::config::read_config(p)?,
        None => GradCheckConfig::default(),
    };
    if let Some(t) = tolerance_override {
        cfg.tolerance = t;
    }
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);

    let (tree, batch, targets) = match cfg.case {
        GradCheckCase::Hyperplane => {
            let tree = Tree::build_full(
                3,
                NodeSpec::hyperplane(vec![10]),
                3,
                Task::Classification,
                cfg.seed,
            )?;
            let batch = Matrix::new(8, 10, (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
            let targets = Targets::Classes((0..8).map(|_| rng.gen_range(0..3)).collect());
            (tree, batch, targets)
        }
        GradCheckCase::Conv => {
            let spec = NodeSpec::convolutional(vec![1, 8, 8], gstree::tree::ConvSpec::same(3));
            let tree = Tree::build_full(2, spec, 2, Task::Classification, cfg.seed)?;
            let batch = Matrix::new(
                6,
                64,
                (0..384).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )?;
            let targets = Targets::Classes((0..6).map(|_| rng.gen_range(0..2)).collect());
            (tree, batch, targets)
        }
    };
    let obj = ObjectiveConfig {
        alpha_u: 0.1,
        alpha_s: 0.1,
        ..ObjectiveConfig::for_task(Task::Classification)
    };
    let report = gradient_check(&tree, &batch, &targets, &obj, cfg.step, cfg.tolerance)?;
    for group in &report.groups {
        println!(
            "{:<28} max_rel_err {:.3e} {}",
            group.name,
            group.max_rel_err,
            if group.max_rel_err < cfg.tolerance {
                "ok"
            } else {
                "FAIL"
            }
        );
    }
    println!(
        "overall max_rel_err {:.3e} (tolerance {:.1e}): {}",
        report.max_rel_err,
        cfg.tolerance,
        if report.pass { "PASS" } else { "FAIL" }
    );
    Ok(report.pass)
}

/// Default grow/train defaults used when assembling configs elsewhere.
pub fn default_train_config() -> TrainConfig {
    TrainConfig::default()
}
