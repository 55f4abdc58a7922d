//! Dataset ingestion (IDX images, CSV tables), train/validation splits,
//! feature normalization, and the versioned JSON model file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tensor};
use crate::objective::Targets;
use crate::tree::{InnerNode, Leaf, NodeId, NodeParams, NodeSpec, Task, Tree};

pub const MODEL_FORMAT_VERSION: &str = "gst-model/1";

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// In-memory dataset: flattened features plus targets. `input_shape`
/// describes one sample (e.g. `[1, 28, 28]` for grayscale images, `[d]`
/// for tabular rows).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Matrix,
    pub input_shape: Vec<usize>,
    pub targets: Targets,
    pub feature_names: Option<Vec<String>>,
    pub normalization: Option<NormStats>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes(c) => c.iter().max().map(|&m| m + 1),
            Targets::Values(_) => None,
        }
    }

    /// Row subset by index, preserving metadata.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut features = Matrix::zeros(idx.len(), self.features.cols());
        for (row, &i) in idx.iter().enumerate() {
            features.row_mut(row).copy_from_slice(self.features.row(i));
        }
        Dataset {
            features,
            input_shape: self.input_shape.clone(),
            targets: self.targets.gather(idx),
            feature_names: self.feature_names.clone(),
            normalization: self.normalization.clone(),
        }
    }
}

fn read_u32_be(reader: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    reader.read_exact(&mut buf).map_err(|e| {
        Error::Data(format!("truncated IDX header: {e}"))
    })?;
    Ok(u32::from_be_bytes(buf))
}

/// IDX image + label pair (the MNIST container format). Pixels are scaled
/// to [0, 1]; the feature shape is `[1, rows, cols]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut images = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&mut images)? as usize;
    let rows = read_u32_be(&mut images)? as usize;
    let cols = read_u32_be(&mut images)? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    images
        .read_exact(&mut pixels)
        .map_err(|e| Error::Data(format!("truncated IDX image payload: {e}")))?;

    let mut labels = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut labels)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = read_u32_be(&mut labels)? as usize;
    if label_count != count {
        return Err(Error::Data(format!(
            "{count} images vs {label_count} labels"
        )));
    }
    let mut label_bytes = vec![0u8; label_count];
    labels
        .read_exact(&mut label_bytes)
        .map_err(|e| Error::Data(format!("truncated IDX label payload: {e}")))?;

    let features = Matrix::new(
        count,
        rows * cols,
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    Ok(Dataset {
        features,
        input_shape: vec![1, rows, cols],
        targets: Targets::Classes(label_bytes.iter().map(|&l| l as usize).collect()),
        feature_names: None,
        normalization: None,
    })
}

/// How to interpret the CSV target column.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub target: String,
    pub task: Task,
}

/// Numeric CSV with a header row. Missing or non-numeric cells are
/// rejected, not imputed.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(BufReader::new(file));
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("cannot read CSV header: {e}")))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if headers.is_empty() {
        return Err(Error::Data("empty CSV file".into()));
    }
    let target_col = headers
        .iter()
        .position(|h| h == &schema.target)
        .ok_or_else(|| Error::Config(format!("target column '{}' not found", schema.target)))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_col)
        .map(|(_, h)| h.clone())
        .collect();

    let mut rows: Vec<f64> = Vec::new();
    let mut class_targets: Vec<usize> = Vec::new();
    let mut value_targets: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("CSV row {}: {e}", line + 2)))?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "CSV row {}: {} cells vs {} header columns",
                line + 2,
                record.len(),
                headers.len()
            )));
        }
        for (i, cell) in record.iter().enumerate() {
            if cell.is_empty() {
                return Err(Error::Data(format!(
                    "CSV row {}: missing value in column '{}'",
                    line + 2,
                    headers[i]
                )));
            }
            if i == target_col {
                match schema.task {
                    Task::Classification => {
                        let v: i64 = cell.parse().map_err(|_| {
                            Error::Data(format!(
                                "CSV row {}: target '{cell}' is not an integer class",
                                line + 2
                            ))
                        })?;
                        if v < 0 {
                            return Err(Error::Data(format!(
                                "CSV row {}: negative class label {v}",
                                line + 2
                            )));
                        }
                        class_targets.push(v as usize);
                    }
                    Task::Regression => {
                        let v: f64 = cell.parse().map_err(|_| {
                            Error::Data(format!(
                                "CSV row {}: target '{cell}' is not numeric",
                                line + 2
                            ))
                        })?;
                        value_targets.push(v);
                    }
                }
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Data(format!(
                        "CSV row {}: non-numeric cell '{cell}' in column '{}'",
                        line + 2,
                        headers[i]
                    ))
                })?;
                rows.push(v);
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Data("CSV has a header but no data rows".into()));
    }
    let d = feature_names.len();
    let features = Matrix::new(count, d, rows)?;
    let targets = match schema.task {
        Task::Classification => Targets::Classes(class_targets),
        Task::Regression => Targets::Values(Matrix::new(count, 1, value_targets)?),
    };
    Ok(Dataset {
        features,
        input_shape: vec![d],
        targets,
        feature_names: Some(feature_names),
        normalization: None,
    })
}

/// Seeded permutation split. With `stratified` set (classification only)
/// each class is split separately so the validation side preserves class
/// proportions within one sample per class.
pub fn split_train_val(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let n = dataset.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_idx: Vec<usize>;
    let mut train_idx: Vec<usize>;
    if stratified {
        let Targets::Classes(labels) = &dataset.targets else {
            return Err(Error::Config(
                "stratified split requires class targets".into(),
            ));
        };
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in labels.iter().enumerate() {
            by_class.entry(c).or_default().push(i);
        }
        train_idx = Vec::new();
        val_idx = Vec::new();
        for (_, mut members) in by_class {
            members.shuffle(&mut rng);
            let take = ((members.len() as f64 * fraction).round() as usize).min(members.len());
            val_idx.extend_from_slice(&members[..take]);
            train_idx.extend_from_slice(&members[take..]);
        }
        train_idx.sort_unstable();
        val_idx.sort_unstable();
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let take = (n as f64 * fraction).round() as usize;
        val_idx = idx.split_off(n - take.min(n));
        train_idx = idx;
        train_idx.sort_unstable();
        val_idx.sort_unstable();
    }
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config(format!(
            "fraction {fraction} yields an empty split side (n = {n})"
        )));
    }
    Ok((dataset.subset(&train_idx), dataset.subset(&val_idx)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMethod {
    Zscore,
    Minmax,
    None,
}

/// Per-feature affine normalization: x -> (x - offset) / scale.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub method: NormMethod,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

const SCALE_FLOOR: f64 = 1e-12;

/// Fit normalization statistics on (the training split of) a dataset and
/// apply them in place.
pub fn normalize(dataset: &mut Dataset, method: NormMethod) -> Result<NormStats> {
    let d = dataset.features.cols();
    let n = dataset.len();
    if n == 0 {
        return Err(Error::Data("cannot normalize an empty dataset".into()));
    }
    let stats = match method {
        NormMethod::None => NormStats {
            method,
            offset: vec![0.0; d],
            scale: vec![1.0; d],
        },
        NormMethod::Zscore => {
            let mut mean = vec![0.0; d];
            for i in 0..n {
                for (m, &x) in mean.iter_mut().zip(dataset.features.row(i)) {
                    *m += x;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; d];
            let mut lo = dataset.features.row(0).to_vec();
            let mut hi = lo.clone();
            for i in 0..n {
                for (j, &x) in dataset.features.row(i).iter().enumerate() {
                    let r = x - mean[j];
                    var[j] += r * r;
                    lo[j] = lo[j].min(x);
                    hi[j] = hi[j].max(x);
                }
            }
            // A feature with min == max maps to exact zeros.
            let mut offset = mean;
            let mut scale = vec![0.0; d];
            for j in 0..d {
                if lo[j] == hi[j] {
                    offset[j] = lo[j];
                    scale[j] = 1.0;
                } else {
                    scale[j] = (var[j] / n as f64).sqrt().max(SCALE_FLOOR);
                }
            }
            NormStats {
                method,
                offset,
                scale,
            }
        }
        NormMethod::Minmax => {
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            for i in 0..n {
                for (j, &x) in dataset.features.row(i).iter().enumerate() {
                    lo[j] = lo[j].min(x);
                    hi[j] = hi[j].max(x);
                }
            }
            let scale = lo
                .iter()
                .zip(&hi)
                .map(|(&l, &h)| (h - l).max(SCALE_FLOOR))
                .collect();
            NormStats {
                method,
                offset: lo,
                scale,
            }
        }
    };
    apply_normalization(dataset, &stats)?;
    dataset.normalization = Some(stats.clone());
    Ok(stats)
}

/// Apply previously fitted statistics (e.g. to a test set).
pub fn apply_normalization(dataset: &mut Dataset, stats: &NormStats) -> Result<()> {
    let d = dataset.features.cols();
    if stats.offset.len() != d || stats.scale.len() != d {
        return Err(Error::Shape(format!(
            "normalization stats dimension {} vs {d} features",
            stats.offset.len()
        )));
    }
    for i in 0..dataset.len() {
        for (j, x) in dataset.features.row_mut(i).iter_mut().enumerate() {
            *x = (*x - stats.offset[j]) / stats.scale[j];
        }
    }
    Ok(())
}

/// Inverse of [`apply_normalization`].
pub fn denormalize_row(stats: &NormStats, row: &mut [f64]) {
    for (j, x) in row.iter_mut().enumerate() {
        *x = *x * stats.scale[j] + stats.offset[j];
    }
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: u32,
    left: u32,
    right: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel_shape: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    conv_bias: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    linear_weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    linear_bias: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LeafRecord {
    id: u32,
    /// Row-major output_dim x flat_dim.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: String,
    task: Task,
    input_shape: Vec<usize>,
    output_dim: usize,
    node_spec: NodeSpec,
    root: u32,
    next_id: u32,
    inner_nodes: Vec<NodeRecord>,
    leaves: Vec<LeafRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    normalization: Option<NormStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

fn sort_json(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let sorted: serde_json::Map<String, Value> = map
                .into_iter()
                .map(|(k, v)| (k, sort_json(v)))
                .collect::<BTreeMap<String, Value>>()
                .into_iter()
                .collect();
            Value::Object(sorted)
        }
        Value::Array(arr) => Value::Array(arr.into_iter().map(sort_json).collect()),
        other => other,
    }
}

/// Canonical JSON: keys sorted lexicographically, no insignificant
/// whitespace, numbers in shortest round-trip form.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&sort_json(v))?)
}

/// Serialize a tree (plus optional normalization stats and provenance) to
/// canonical JSON at `path`.
pub fn save_model(
    tree: &Tree,
    stats: Option<&NormStats>,
    provenance: Option<&Provenance>,
    path: &Path,
) -> Result<()> {
    tree.validate()?;
    let mut inner_nodes = Vec::new();
    for id in tree.inner_ids() {
        let node = tree.inner(id).expect("listed id");
        let mut rec = NodeRecord {
            id: id.0,
            left: node.left.0,
            right: node.right.0,
            weights: None,
            bias: None,
            kernel: None,
            kernel_shape: None,
            conv_bias: None,
            linear_weights: None,
            linear_bias: None,
        };
        match &node.params {
            NodeParams::Hyperplane { weights, bias } => {
                rec.weights = Some(weights.clone());
                rec.bias = Some(*bias);
            }
            NodeParams::Conv {
                kernel,
                conv_bias,
                linear_weights,
                linear_bias,
            } => {
                rec.kernel = Some(kernel.data().to_vec());
                rec.kernel_shape = Some(kernel.shape().to_vec());
                rec.conv_bias = Some(conv_bias.clone());
                rec.linear_weights = linear_weights.clone();
                rec.linear_bias = Some(*linear_bias);
            }
        }
        inner_nodes.push(rec);
    }
    let leaves = tree
        .leaf_ids()
        .map(|id| {
            let leaf = tree.leaf(id).expect("listed id");
            LeafRecord {
                id: id.0,
                weights: leaf.weights.data().to_vec(),
                bias: leaf.bias.clone(),
            }
        })
        .collect();
    let file = ModelFile {
        format_version: MODEL_FORMAT_VERSION.to_string(),
        task: tree.task(),
        input_shape: tree.input_shape().to_vec(),
        output_dim: tree.output_dim(),
        node_spec: tree.spec().clone(),
        root: tree.root().0,
        next_id: tree.next_id_watermark(),
        inner_nodes,
        leaves,
        normalization: stats.cloned(),
        provenance: provenance.cloned(),
    };
    let text = to_canonical_json(&file)?;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(text.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Load and validate a model file; the returned tree reproduces the saved
/// one bit-exactly.
pub fn load_model(path: &Path) -> Result<(Tree, Option<NormStats>, Option<Provenance>)> {
    let text = std::fs::read_to_string(path)?;
    let probe: Value = serde_json::from_str(&text)?;
    let version = probe
        .get("format_version")
        .and_then(|v| v.as_str())
        .unwrap_or("<missing>");
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version.to_string(),
            expected: MODEL_FORMAT_VERSION.to_string(),
        });
    }
    let file: ModelFile = serde_json::from_str(&text)?;
    if file.node_spec.input_shape != file.input_shape {
        return Err(Error::Data(
            "input_shape disagrees with node_spec.input_shape".into(),
        ));
    }
    let mut inner = Vec::new();
    for rec in file.inner_nodes {
        let params = match (&rec.weights, &rec.kernel) {
            (Some(w), None) => NodeParams::Hyperplane {
                weights: w.clone(),
                bias: rec.bias.ok_or_else(|| {
                    Error::Data(format!("node {}: missing bias", rec.id))
                })?,
            },
            (None, Some(k)) => {
                let shape = rec.kernel_shape.clone().ok_or_else(|| {
                    Error::Data(format!("node {}: missing kernel_shape", rec.id))
                })?;
                NodeParams::Conv {
                    kernel: Tensor::new(shape, k.clone())?,
                    conv_bias: rec.conv_bias.clone().ok_or_else(|| {
                        Error::Data(format!("node {}: missing conv_bias", rec.id))
                    })?,
                    linear_weights: rec.linear_weights.clone(),
                    linear_bias: rec.linear_bias.ok_or_else(|| {
                        Error::Data(format!("node {}: missing linear_bias", rec.id))
                    })?,
                }
            }
            _ => {
                return Err(Error::Data(format!(
                    "node {}: exactly one of weights/kernel must be present",
                    rec.id
                )))
            }
        };
        inner.push(InnerNode {
            id: NodeId(rec.id),
            left: NodeId(rec.left),
            right: NodeId(rec.right),
            params,
        });
    }
    let flat_dim: usize = file.input_shape.iter().product();
    let mut leaves = Vec::new();
    for rec in file.leaves {
        if rec.weights.len() != file.output_dim * flat_dim {
            return Err(Error::Data(format!(
                "leaf {}: weight length {} vs {}x{flat_dim}",
                rec.id,
                rec.weights.len(),
                file.output_dim
            )));
        }
        leaves.push(Leaf {
            id: NodeId(rec.id),
            weights: Matrix::new(file.output_dim, flat_dim, rec.weights)?,
            bias: rec.bias,
        });
    }
    let tree = Tree::from_parts(
        NodeId(file.root),
        inner,
        leaves,
        file.node_spec,
        file.output_dim,
        file.task,
        file.next_id,
    )?;
    Ok((tree, file.normalization, file.provenance))
}

/// Writes a metrics map as pretty JSON (stable key order).
pub fn write_metrics_json(path: &Path, entries: &[(&str, Value)]) -> Result<()> {
    let mut map = serde_json::Map::new();
    for (k, v) in entries {
        map.insert((*k).to_string(), v.clone());
    }
    let value = sort_json(Value::Object(map));
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(serde_json::to_string_pretty(&value)?.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Convenience JSON value for f64 metrics.
pub fn metric(v: f64) -> Value {
    json!(v)
}
