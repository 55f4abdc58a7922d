//! Run configuration files: JSON with a fixed schema, unknown keys
//! rejected. All run state lives in the file plus command-line flags;
//! environment variables are never consulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gstree::dataio::{self, CsvSchema, Dataset, NormMethod};
use gstree::error::{Error, Result};
use gstree::objective::{ObjectiveConfig, SplitPenaltyVariant, TaskLoss};
use gstree::trainer::TrainConfig;
use gstree::tree::{ConvSpec, NodeKind, NodeSpec, Task};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "format", rename_all = "snake_case")]
pub enum DataConfig {
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        /// Optional seeded subset of the training set (size cap).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit_train: Option<usize>,
    },
    Csv {
        path: PathBuf,
        target: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_path: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit_train: Option<usize>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: NodeKind,
    pub depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conv: Option<ConvSpec>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSection {
    pub alpha_u: f64,
    pub alpha_s: f64,
    pub split_variant: Option<SplitPenaltyVariant>,
    pub epsilon: Option<f64>,
}

impl ObjectiveSection {
    pub fn build(&self, task: Task) -> ObjectiveConfig {
        let mut cfg = ObjectiveConfig::for_task(task);
        cfg.alpha_u = self.alpha_u;
        cfg.alpha_s = self.alpha_s;
        if let Some(v) = self.split_variant {
            cfg.split_variant = v;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon = e;
        }
        cfg
    }
}

/// Configuration for `train`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub seed: u64,
    pub task: Task,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize: Option<NormMethod>,
    /// Regression output width; classification infers it from the labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dim: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrowSection {
    /// `None` uses the depth-based schedule (4 adds 8; 5-6 add 16; 7+ add 32).
    pub max_iters: Option<usize>,
    pub retrain_steps: usize,
    pub w_min: Option<f64>,
    /// Fraction of `train.max_epochs` used per full refit.
    pub refit_epoch_fraction: f64,
}

impl Default for GrowSection {
    fn default() -> Self {
        GrowSection {
            max_iters: None,
            retrain_steps: 4,
            w_min: None,
            refit_epoch_fraction: 0.2,
        }
    }
}

/// Configuration for `grow`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowRunConfig {
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub grow: GrowSection,
}

/// Configuration for `gradcheck`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub case: GradCheckCase,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradCheckCase {
    Hyperplane,
    Conv,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            case: GradCheckCase::Hyperplane,
            seed: 0,
            step: 1e-6,
            tolerance: 1e-5,
        }
    }
}

pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))
}

/// SHA-256 of the canonical JSON form of a config, for provenance.
pub fn config_digest<T: Serialize>(cfg: &T) -> Result<String> {
    let canon = dataio::to_canonical_json(cfg)?;
    let mut hasher = Sha256::new();
    hasher.update(canon.as_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

impl ModelConfig {
    pub fn node_spec(&self, input_shape: Vec<usize>) -> Result<NodeSpec> {
        let spec = match self.kind {
            NodeKind::Hyperplane => {
                if self.conv.is_some() {
                    return Err(Error::Config(
                        "hyperplane model must not set conv options".into(),
                    ));
                }
                // Hyperplane trees act on the flattened input.
                NodeSpec::hyperplane(vec![input_shape.iter().product()])
            }
            NodeKind::Convolutional => {
                NodeSpec::convolutional(input_shape, self.conv.clone().unwrap_or_default())
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub struct LoadedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
}

impl DataConfig {
    pub fn load(&self, seed: u64) -> Result<LoadedData> {
        match self {
            DataConfig::Idx {
                images,
                labels,
                test_images,
                test_labels,
                limit_train,
            } => {
                let mut train = dataio::load_idx(images, labels)?;
                if let Some(limit) = limit_train {
                    train = seeded_subset(&train, *limit, seed);
                }
                let test = match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => Some(dataio::load_idx(ti, tl)?),
                    (None, None) => None,
                    _ => {
                        return Err(Error::Config(
                            "test_images and test_labels must be supplied together".into(),
                        ))
                    }
                };
                Ok(LoadedData { train, test })
            }
            DataConfig::Csv {
                path,
                target,
                test_path,
                limit_train,
            } => {
                let schema = CsvSchema {
                    target: target.clone(),
                    task: Task::Classification,
                };
                let mut train = dataio::load_csv(path, &schema)?;
                if let Some(limit) = limit_train {
                    train = seeded_subset(&train, *limit, seed);
                }
                let test = match test_path {
                    Some(p) => Some(dataio::load_csv(p, &schema)?),
                    None => None,
                };
                Ok(LoadedData { train, test })
            }
        }
    }

    /// CSV loading defaults to classification; regression runs re-load with
    /// the right schema.
    pub fn load_for_task(&self, task: Task, seed: u64) -> Result<LoadedData> {
        match (self, task) {
            (DataConfig::Csv { path, target, test_path, limit_train }, Task::Regression) => {
                let schema = CsvSchema {
                    target: target.clone(),
                    task,
                };
                let mut train = dataio::load_csv(path, &schema)?;
                if let Some(limit) = limit_train {
                    train = seeded_subset(&train, *limit, seed);
                }
                let test = match test_path {
                    Some(p) => Some(dataio::load_csv(p, &schema)?),
                    None => None,
                };
                Ok(LoadedData { train, test })
            }
            _ => self.load(seed),
        }
    }
}

/// Deterministic subset of the first `limit` rows of a seeded permutation.
pub fn seeded_subset(dataset: &Dataset, limit: usize, seed: u64) -> Dataset {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if limit >= dataset.len() {
        return dataset.clone();
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(limit);
    idx.sort_unstable();
    dataset.subset(&idx)
}

/// The task loss implied by a task.
pub fn task_loss_for(task: Task) -> TaskLoss {
    match task {
        Task::Classification => TaskLoss::SoftmaxCrossEntropy,
        Task::Regression => TaskLoss::MeanSquaredError,
    }
}
