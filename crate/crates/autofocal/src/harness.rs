//! Experiment runner: declarative configs, the training loop, loss-vs-loss
//! comparisons under shared seeds, and trace/plot emission.
//!
//! Configs are flat `key = value` text with dotted section prefixes (see
//! [`ExperimentConfig::parse`]); everything an experiment does is derived
//! from the config plus its seed, so a rerun reproduces the trace CSV byte
//! for byte.

pub mod svg;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{self, DatasetKind, DatasetSpec, GroundTruth, Labels};
use crate::error::{Error, Result};
use crate::focal::{GammaSchedule, ProgressPolicy, ProgressTracker};
use crate::losses::{
    self, BaseLoss, ClassificationBatch, LossOutput, RegressionBatch, TargetGroup, TaskVariance,
    VarianceNormalization,
};
use crate::mat::Matrix;
use crate::metrics::{
    classification_metrics, convergence_step, regression_progress_metric, RunTrace, TraceRecord,
};
use crate::nn::{Activation, HeadActivation, HeadSpec, LrSchedule, Mlp, OptimizerState};

// Derives independent RNG streams from the experiment seed.
const MODEL_SALT: u64 = 0x6d6f64656c5f73;
const BATCH_SALT: u64 = 0x62617463685f73;

/// Which loss trains the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    FocalClassification,
    AlphaBalanced,
    L1,
    L2,
    FocalRegression,
    MultilossL2,
}

impl LossKind {
    fn parse(token: &str) -> Result<Self> {
        match token {
            "cross-entropy" => Ok(Self::CrossEntropy),
            "focal-classification" => Ok(Self::FocalClassification),
            "alpha-balanced" => Ok(Self::AlphaBalanced),
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            "focal-regression" => Ok(Self::FocalRegression),
            "multiloss-l2" => Ok(Self::MultilossL2),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }

    fn token(self) -> &'static str {
        match self {
            Self::CrossEntropy => "cross-entropy",
            Self::FocalClassification => "focal-classification",
            Self::AlphaBalanced => "alpha-balanced",
            Self::L1 => "l1",
            Self::L2 => "l2",
            Self::FocalRegression => "focal-regression",
            Self::MultilossL2 => "multiloss-l2",
        }
    }

    fn is_classification(self) -> bool {
        matches!(
            self,
            Self::CrossEntropy | Self::FocalClassification | Self::AlphaBalanced
        )
    }

    fn is_focal(self) -> bool {
        matches!(self, Self::FocalClassification | Self::FocalRegression)
    }

    fn uses_variance(self) -> bool {
        matches!(self, Self::FocalRegression | Self::MultilossL2)
    }
}

/// Loss selection plus its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Present exactly for the focal kinds.
    pub schedule: Option<GammaSchedule>,
    /// Base loss under focal regression.
    pub base: BaseLoss,
    pub normalization: VarianceNormalization,
    pub sigma2_init: f64,
    pub smoothing: f64,
    /// Progress policy override for multi-target classification.
    pub policy: Option<ProgressPolicy>,
    /// Task weight applied to the loss and its gradients.
    pub weight: f64,
}

impl LossConfig {
    /// Human-readable identity for reports and file names.
    pub fn label(&self) -> String {
        let mut label = self.kind.token().to_string();
        if let Some(schedule) = &self.schedule {
            label.push('/');
            label.push_str(&match schedule.kind() {
                crate::focal::GammaKind::ShannonInfo => "shannon-info".to_string(),
                crate::focal::GammaKind::QuantileH(h) => format!("quantile:{h}"),
                crate::focal::GammaKind::Fixed(g) => format!("fixed:{g}"),
            });
        }
        if self.kind == LossKind::FocalRegression {
            label.push('/');
            label.push_str(match self.base {
                BaseLoss::L1 => "l1",
                BaseLoss::L2 => "l2",
            });
        }
        label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub eval_every: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay_steps: u64,
}

/// Convergence target evaluated on the validation series.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceConfig {
    pub metric: String,
    pub threshold: f64,
    pub patience: usize,
}

/// Declarative description of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DatasetSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub convergence: Option<ConvergenceConfig>,
    pub plots: bool,
}

/// Key-value store for config parsing: tracks consumption so unknown keys
/// become errors.
struct KeyMap {
    entries: BTreeMap<String, String>,
    consumed: std::collections::BTreeSet<String>,
}

impl KeyMap {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    idx + 1
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if entries.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate key '{key}'")));
            }
        }
        Ok(Self {
            entries,
            consumed: Default::default(),
        })
    }

    fn get(&mut self, key: &str) -> Option<String> {
        let value = self.entries.get(key).cloned();
        if value.is_some() {
            self.consumed.insert(key.to_string());
        }
        value
    }

    fn parse_value<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| Error::Config(format!("key '{key}': bad value '{raw}': {e}"))),
        }
    }

    fn required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.parse_value(key)?
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    fn or_default<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse_value(key)?.unwrap_or(default))
    }

    fn finish(self) -> Result<()> {
        let leftover: Vec<&String> = self
            .entries
            .keys()
            .filter(|k| !self.consumed.contains(*k))
            .collect();
        if leftover.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown key(s): {}",
                leftover
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses the flat `key = value` format. `#` starts a comment line;
    /// keys are dotted section paths (`data.kind`, `loss.h`, ...).
    pub fn parse(text: &str) -> Result<Self> {
        let mut keys = KeyMap::parse(text)?;

        let seed: u64 = keys.required("seed")?;
        let out = keys.get("out").map(PathBuf::from);
        let data = parse_data_section(&mut keys, seed)?;

        // Model section.
        let hidden: Vec<usize> = match keys.get("model.hidden") {
            None => vec![16, 16],
            Some(raw) if raw.trim().is_empty() => vec![],
            Some(raw) => raw
                .split(',')
                .map(|t| {
                    t.trim().parse::<usize>().map_err(|e| {
                        Error::Config(format!("key 'model.hidden': bad value '{t}': {e}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let activation =
            Activation::from_name(&keys.or_default("model.activation", "relu".to_string())?)?;
        let model = ModelConfig { hidden, activation };

        // Loss section.
        let loss_kind = LossKind::parse(&keys.required::<String>("loss.kind")?)?;
        let schedule_token = keys.get("loss.schedule");
        let h = keys.parse_value::<f64>("loss.h")?;
        let gamma = keys.parse_value::<f64>("loss.gamma")?;
        let clamp_max = keys.parse_value::<f64>("loss.clamp-max")?;
        let schedule = match (&schedule_token, loss_kind.is_focal()) {
            (None, false) => None,
            (None, true) => {
                return Err(Error::Config(format!(
                    "loss.kind = {} needs loss.schedule",
                    loss_kind.token()
                )))
            }
            (Some(_), false) => {
                return Err(Error::Config(format!(
                    "loss.schedule is only valid for focal losses, not {}",
                    loss_kind.token()
                )))
            }
            (Some(token), true) => Some(match token.as_str() {
                "shannon-info" => {
                    if h.is_some() {
                        return Err(Error::Config(
                            "loss.h is only valid with loss.schedule = quantile".into(),
                        ));
                    }
                    if gamma.is_some() {
                        return Err(Error::Config(
                            "loss.gamma is only valid with loss.schedule = fixed".into(),
                        ));
                    }
                    GammaSchedule::shannon_info()
                }
                "quantile" => {
                    if gamma.is_some() {
                        return Err(Error::Config(
                            "loss.gamma is only valid with loss.schedule = fixed".into(),
                        ));
                    }
                    let h = h.ok_or_else(|| {
                        Error::Config("loss.schedule = quantile needs loss.h".into())
                    })?;
                    GammaSchedule::quantile(h).map_err(|e| Error::Config(e.to_string()))?
                }
                "fixed" => {
                    if h.is_some() {
                        return Err(Error::Config(
                            "loss.h is only valid with loss.schedule = quantile".into(),
                        ));
                    }
                    let gamma = gamma.ok_or_else(|| {
                        Error::Config("loss.schedule = fixed needs loss.gamma".into())
                    })?;
                    GammaSchedule::fixed(gamma).map_err(|e| Error::Config(e.to_string()))?
                }
                other => return Err(Error::Config(format!("unknown loss.schedule '{other}'"))),
            }),
        };
        let schedule = match (schedule, clamp_max) {
            (Some(s), Some(c)) => Some(
                s.with_clamp_max(Some(c))
                    .map_err(|e| Error::Config(e.to_string()))?,
            ),
            (None, Some(_)) => {
                return Err(Error::Config(
                    "loss.clamp-max is only valid with a gamma schedule".into(),
                ))
            }
            (s, None) => s,
        };

        let base = match keys.get("loss.base") {
            None => BaseLoss::L2,
            Some(raw) => {
                if loss_kind != LossKind::FocalRegression {
                    return Err(Error::Config(
                        "loss.base is only valid for focal-regression".into(),
                    ));
                }
                match raw.as_str() {
                    "l1" => BaseLoss::L1,
                    "l2" => BaseLoss::L2,
                    other => return Err(Error::Config(format!("unknown loss.base '{other}'"))),
                }
            }
        };
        let normalization = match keys.get("loss.variance-normalization") {
            None => VarianceNormalization::Squared,
            Some(raw) => {
                if !loss_kind.uses_variance() {
                    return Err(Error::Config(
                        "loss.variance-normalization needs a variance-carrying loss".into(),
                    ));
                }
                match raw.as_str() {
                    "squared" => VarianceNormalization::Squared,
                    "std" => VarianceNormalization::Std,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown loss.variance-normalization '{other}'"
                        )))
                    }
                }
            }
        };
        let sigma2_init: f64 = keys.or_default("loss.sigma2-init", 1.0)?;
        if sigma2_init <= 0.0 || !sigma2_init.is_finite() {
            return Err(Error::Config(format!(
                "loss.sigma2-init must be positive, got {sigma2_init}"
            )));
        }
        let smoothing: f64 = keys.or_default("loss.smoothing", 0.95)?;
        let policy = match keys.get("loss.policy") {
            None => None,
            Some(raw) => {
                if loss_kind != LossKind::FocalClassification {
                    return Err(Error::Config(
                        "loss.policy is only valid for focal-classification".into(),
                    ));
                }
                Some(match raw.as_str() {
                    "single" => ProgressPolicy::SingleTarget,
                    "multi-all" => ProgressPolicy::MultiTargetAllExamples,
                    "multi-positive" => ProgressPolicy::MultiTargetPositiveOnly,
                    other => return Err(Error::Config(format!("unknown loss.policy '{other}'"))),
                })
            }
        };
        let default_weight = if loss_kind.is_classification() {
            10.0
        } else {
            1.0
        };
        let weight: f64 = keys.or_default("loss.weight", default_weight)?;
        if !weight.is_finite() {
            return Err(Error::Config("loss.weight must be finite".into()));
        }
        let loss = LossConfig {
            kind: loss_kind,
            schedule,
            base,
            normalization,
            sigma2_init,
            smoothing,
            policy,
            weight,
        };

        // Train section.
        let steps: u64 = keys.or_default("train.steps", 5000)?;
        let batch: usize = keys.or_default("train.batch", 32)?;
        if batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        let eval_every: u64 = keys.or_default("train.eval-every", 100)?;
        if eval_every == 0 {
            return Err(Error::Config("train.eval-every must be positive".into()));
        }
        let lr_start: f64 = keys.or_default("train.lr-start", 1e-4)?;
        let lr_end: f64 = keys.or_default("train.lr-end", 1e-6)?;
        let decay_steps: u64 = keys.or_default("train.decay-steps", steps.max(1))?;
        let train = TrainConfig {
            steps,
            batch,
            eval_every,
            lr_start,
            lr_end,
            decay_steps,
        };
        LrSchedule::new(lr_start, lr_end, decay_steps)?;

        // Convergence target.
        let metric = keys.get("eval.metric");
        let threshold = keys.parse_value::<f64>("eval.threshold")?;
        let patience: usize = keys.or_default("eval.patience", 3)?;
        let convergence = match (metric, threshold) {
            (Some(metric), Some(threshold)) => Some(ConvergenceConfig {
                metric,
                threshold,
                patience,
            }),
            (None, None) => None,
            _ => {
                return Err(Error::Config(
                    "eval.metric and eval.threshold must be given together".into(),
                ))
            }
        };

        let plots = match keys
            .or_default("output.plots", "false".to_string())?
            .as_str()
        {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::Config(format!(
                    "output.plots must be true or false, got '{other}'"
                )))
            }
        };

        keys.finish()?;
        Ok(Self {
            seed,
            out,
            data,
            model,
            loss,
            train,
            convergence,
            plots,
        })
    }

    /// Everything except the loss section, for comparability checks.
    fn shared_part(
        &self,
    ) -> (
        u64,
        &DatasetSpec,
        &ModelConfig,
        &TrainConfig,
        &Option<ConvergenceConfig>,
        bool,
    ) {
        (
            self.seed,
            &self.data,
            &self.model,
            &self.train,
            &self.convergence,
            self.plots,
        )
    }
}

fn parse_data_section(keys: &mut KeyMap, seed: u64) -> Result<DatasetSpec> {
    let kind = match keys.required::<String>("data.kind")?.as_str() {
        "imbalanced-blobs" => DatasetKind::ImbalancedBlobs,
        "multilabel-synthetic" => DatasetKind::MultilabelSynthetic,
        "noisy-regression" => DatasetKind::NoisyRegression,
        "csv-file" => DatasetKind::CsvFile,
        other => return Err(Error::Config(format!("unknown data.kind '{other}'"))),
    };
    let samples: usize = match kind {
        DatasetKind::CsvFile => keys.or_default("data.samples", 0)?,
        _ => keys.required("data.samples")?,
    };
    let classes: usize = keys.or_default("data.classes", 2)?;
    let targets: usize = keys.or_default("data.targets", 1)?;
    let default_features = match kind {
        DatasetKind::MultilabelSynthetic => 2 * classes,
        DatasetKind::NoisyRegression => 1,
        _ => 2,
    };
    let feature_dim: usize = keys.or_default("data.features", default_features)?;
    let imbalance_ratio: f64 = keys.or_default("data.ratio", 1.0)?;
    let separation: f64 = keys.or_default("data.separation", 4.0)?;
    let noise_sigma: Vec<f64> = match keys.get("data.sigma") {
        None => vec![0.5],
        Some(raw) => raw
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("key 'data.sigma': bad value '{t}': {e}")))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let outlier_fraction: f64 = keys.or_default("data.outlier-fraction", 0.0)?;
    let outlier_magnitude: f64 = keys.or_default("data.outlier-magnitude", 0.0)?;
    let ground_truth = match keys
        .or_default("data.ground-truth", "affine".to_string())?
        .as_str()
    {
        "affine" => GroundTruth::Affine,
        "sinusoidal" => GroundTruth::Sinusoidal,
        other => {
            return Err(Error::Config(format!(
                "unknown data.ground-truth '{other}'"
            )))
        }
    };
    let path = keys.get("data.path").map(PathBuf::from);
    let schema = match keys.get("data.schema") {
        None => None,
        Some(raw) => Some(data::CsvSchema::parse(&raw)?),
    };
    Ok(DatasetSpec {
        kind,
        samples,
        classes,
        targets,
        imbalance_ratio,
        separation,
        feature_dim,
        noise_sigma,
        outlier_fraction,
        outlier_magnitude,
        ground_truth,
        seed,
        path,
        schema,
    })
}

/// Parses a data-only spec (the `seed` and `data.*` keys), as used by the
/// dataset-generation subcommand.
pub fn parse_dataset_spec(text: &str) -> Result<DatasetSpec> {
    let mut keys = KeyMap::parse(text)?;
    let seed: u64 = keys.required("seed")?;
    let spec = parse_data_section(&mut keys, seed)?;
    keys.finish()?;
    Ok(spec)
}

/// What one training task works with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskKind {
    SingleClass,
    MultiClass,
    Regression,
}

const HEAD_NAME: &str = "out";

struct LossState {
    schedule: Option<GammaSchedule>,
    tracker: Option<ProgressTracker>,
    variances: Vec<TaskVariance>,
    groups: Vec<TargetGroup>,
}

impl LossState {
    fn new(config: &ExperimentConfig, task: TaskKind, target_count: usize) -> Result<Self> {
        let loss = &config.loss;
        let tracker = loss.kind.is_focal().then(|| {
            let policy = loss.policy.unwrap_or(match task {
                TaskKind::MultiClass => ProgressPolicy::MultiTargetPositiveOnly,
                _ => ProgressPolicy::SingleTarget,
            });
            ProgressTracker::new(policy).with_smoothing_factor(loss.smoothing)
        });
        let tracker = tracker.transpose()?;
        let variances = if loss.kind.uses_variance() {
            (0..target_count)
                .map(|_| TaskVariance::from_sigma2(loss.sigma2_init))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let groups = (0..target_count)
            .map(|t| TargetGroup {
                name: format!("t{t}"),
                dims: vec![t],
            })
            .collect();
        Ok(Self {
            schedule: loss.schedule,
            tracker,
            variances,
            groups,
        })
    }

    fn sigma2_values(&self) -> Vec<f64> {
        self.variances.iter().map(|v| v.sigma2()).collect()
    }
}

/// Everything a finished run hands back.
pub struct RunArtifacts {
    pub trace: RunTrace,
    pub model: Mlp,
    pub variances: Vec<TaskVariance>,
    /// Metrics of the final model on the test split.
    pub final_metrics: Vec<(String, f64)>,
    /// Convergence step on the validation series, when a target is set.
    pub convergence: Option<u64>,
}

fn task_of(config: &ExperimentConfig, labels: &Labels) -> Result<TaskKind> {
    let task = match labels {
        Labels::Class(_) => TaskKind::SingleClass,
        Labels::Mask { .. } => TaskKind::MultiClass,
        Labels::Real(_) => TaskKind::Regression,
    };
    let compatible = match task {
        TaskKind::SingleClass => config.loss.kind.is_classification(),
        TaskKind::MultiClass => matches!(
            config.loss.kind,
            LossKind::CrossEntropy | LossKind::FocalClassification
        ),
        TaskKind::Regression => !config.loss.kind.is_classification(),
    };
    if !compatible {
        return Err(Error::Config(format!(
            "loss '{}' cannot train on this dataset's labels",
            config.loss.kind.token()
        )));
    }
    Ok(task)
}

fn output_width(labels: &Labels) -> usize {
    match labels {
        Labels::Class(v) => v.iter().copied().max().unwrap_or(0) + 1,
        Labels::Mask { classes, .. } => *classes,
        Labels::Real(m) => m.cols(),
    }
}

fn metric_names(task: TaskKind) -> Vec<String> {
    match task {
        TaskKind::SingleClass | TaskKind::MultiClass => vec![
            "accuracy".to_string(),
            "macro_f1".to_string(),
            "minority_recall".to_string(),
        ],
        TaskKind::Regression => vec!["mse".to_string(), "p_correct".to_string()],
    }
}

/// Cyclic shuffled index stream; batches may span epoch boundaries so every
/// batch has the same size.
struct BatchStream {
    indices: Vec<usize>,
    pos: usize,
    rng: rand::rngs::StdRng,
}

impl BatchStream {
    fn new(len: usize, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut stream = Self {
            indices: (0..len).collect(),
            pos: 0,
            rng: rand::rngs::StdRng::seed_from_u64(seed),
        };
        stream.reshuffle();
        stream
    }

    fn reshuffle(&mut self) {
        use rand::Rng;
        for i in (1..self.indices.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            self.indices.swap(i, j);
        }
        self.pos = 0;
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.pos == self.indices.len() {
                self.reshuffle();
            }
            batch.push(self.indices[self.pos]);
            self.pos += 1;
        }
        batch
    }
}

fn gather_features(features: &Matrix, indices: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(indices.len(), features.cols());
    for (row, &i) in indices.iter().enumerate() {
        out.row_mut(row).copy_from_slice(features.row(i));
    }
    out
}

fn evaluate_loss(
    config: &ExperimentConfig,
    state: &mut LossState,
    outputs: &Matrix,
    labels: &Labels,
    indices: &[usize],
) -> Result<LossOutput> {
    match config.loss.kind {
        LossKind::CrossEntropy | LossKind::FocalClassification | LossKind::AlphaBalanced => {
            let batch = match labels {
                Labels::Class(all) => ClassificationBatch::single_target(
                    outputs.clone(),
                    indices.iter().map(|&i| all[i]).collect(),
                )?,
                Labels::Mask { data, classes } => ClassificationBatch::multi_target(
                    outputs.clone(),
                    indices
                        .iter()
                        .flat_map(|&i| data[i * classes..(i + 1) * classes].iter().copied())
                        .collect(),
                )?,
                Labels::Real(_) => unreachable!("task was validated"),
            };
            match config.loss.kind {
                LossKind::CrossEntropy => Ok(losses::cross_entropy(&batch)),
                LossKind::AlphaBalanced => losses::alpha_balanced_classification(&batch),
                LossKind::FocalClassification => Ok(losses::focal_classification(
                    &batch,
                    state.schedule.as_ref().expect("validated"),
                    state.tracker.as_mut().expect("validated"),
                )),
                _ => unreachable!(),
            }
        }
        LossKind::L1 | LossKind::L2 | LossKind::FocalRegression | LossKind::MultilossL2 => {
            let Labels::Real(all) = labels else {
                unreachable!("task was validated")
            };
            let mut batch_labels = Matrix::zeros(indices.len(), all.cols());
            for (row, &i) in indices.iter().enumerate() {
                batch_labels.row_mut(row).copy_from_slice(all.row(i));
            }
            let batch = RegressionBatch::new(outputs.clone(), batch_labels, state.groups.clone())?;
            match config.loss.kind {
                LossKind::L1 => losses::plain_regression(&batch, BaseLoss::L1),
                LossKind::L2 => losses::plain_regression(&batch, BaseLoss::L2),
                LossKind::FocalRegression => losses::focal_regression(
                    &batch,
                    &state.variances,
                    state.schedule.as_ref().expect("validated"),
                    state.tracker.as_mut().expect("validated"),
                    config.loss.base,
                    config.loss.normalization,
                ),
                LossKind::MultilossL2 => losses::multiloss_regression(
                    &batch,
                    &state.variances,
                    BaseLoss::L2,
                    config.loss.normalization,
                ),
                _ => unreachable!(),
            }
        }
    }
}

fn evaluate_split(
    model: &Mlp,
    split: &data::Dataset,
    task: TaskKind,
    state: &LossState,
    normalization: VarianceNormalization,
) -> Result<Vec<f64>> {
    let pass = model.forward(&split.features)?;
    let outputs = pass.head(model, HEAD_NAME).expect("model has the head");
    match task {
        TaskKind::SingleClass => {
            let Labels::Class(labels) = &split.labels else {
                unreachable!()
            };
            let predicted: Vec<usize> = (0..outputs.rows())
                .map(|i| argmax(outputs.row(i)))
                .collect();
            let m = classification_metrics(&predicted, labels, outputs.cols())?;
            Ok(vec![m.accuracy, m.macro_f1, m.minority_recall])
        }
        TaskKind::MultiClass => {
            let Labels::Mask { data, classes } = &split.labels else {
                unreachable!()
            };
            Ok(multilabel_metrics(outputs, data, *classes))
        }
        TaskKind::Regression => {
            let Labels::Real(labels) = &split.labels else {
                unreachable!()
            };
            let reference = split.clean_targets.as_ref().unwrap_or(labels);
            let mut mse = 0.0;
            for (o, r) in outputs.iter().zip(reference.iter()) {
                let d = o - r;
                mse += d * d;
            }
            mse /= (outputs.rows() * outputs.cols()) as f64;
            let p_correct = if state.variances.is_empty() {
                0.0
            } else {
                let batch =
                    RegressionBatch::new(outputs.clone(), labels.clone(), state.groups.clone())?;
                let per_group =
                    regression_progress_metric(&batch, &state.variances, normalization)?;
                let total_dims: usize = state.groups.iter().map(|g| g.dims.len()).sum();
                per_group
                    .iter()
                    .zip(&state.groups)
                    .map(|((_, p), g)| p.value() * g.dims.len() as f64)
                    .sum::<f64>()
                    / total_dims as f64
            };
            Ok(vec![mse, p_correct])
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Element accuracy, per-label macro F1 and rarest-label recall for
/// multi-target classification at a 0.5 threshold.
fn multilabel_metrics(probs: &Matrix, mask: &[bool], classes: usize) -> Vec<f64> {
    let n = probs.rows();
    let mut correct = 0usize;
    let mut f1_sum = 0.0;
    let mut f1_count = 0usize;
    let mut minority: Option<(usize, f64)> = None; // (active count, recall)
    for l in 0..classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut label_count = 0usize;
        for i in 0..n {
            let predicted = probs.get(i, l) >= 0.5;
            let actual = mask[i * classes + l];
            if predicted == actual {
                correct += 1;
            }
            if actual {
                label_count += 1;
                if predicted {
                    tp += 1;
                }
            } else if predicted {
                fp += 1;
            }
        }
        if label_count > 0 {
            let recall = tp as f64 / label_count as f64;
            let precision = if tp + fp > 0 {
                tp as f64 / (tp + fp) as f64
            } else {
                0.0
            };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            f1_sum += f1;
            f1_count += 1;
            if minority.is_none_or(|(count, _)| label_count < count) {
                minority = Some((label_count, recall));
            }
        }
    }
    let accuracy = correct as f64 / (n * classes) as f64;
    let macro_f1 = if f1_count > 0 {
        f1_sum / f1_count as f64
    } else {
        0.0
    };
    let minority_recall = minority.map_or(0.0, |(_, r)| r);
    vec![accuracy, macro_f1, minority_recall]
}

/// Runs one experiment, writing `trace.csv`, `summary.txt`, `model.ckpt`
/// and (optionally) SVG plots under `out_dir`.
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<RunArtifacts> {
    std::fs::create_dir_all(out_dir)?;
    // Fail before training if the directory is not writable.
    let trace_path = out_dir.join("trace.csv");
    let probe = std::fs::File::create(&trace_path)
        .map_err(|e| Error::Config(format!("cannot write to {}: {e}", trace_path.display())))?;
    drop(probe);

    let splits = data::generate(&config.data)?;
    let task = task_of(config, &splits.train.labels)?;
    let width = output_width(&splits.train.labels)
        .max(output_width(&splits.validation.labels))
        .max(output_width(&splits.test.labels));
    let head_activation = match task {
        TaskKind::SingleClass => HeadActivation::Softmax,
        TaskKind::MultiClass => HeadActivation::Sigmoid,
        TaskKind::Regression => HeadActivation::Identity,
    };
    let hidden: Vec<(usize, Activation)> = config
        .model
        .hidden
        .iter()
        .map(|&s| (s, config.model.activation))
        .collect();
    let mut model = Mlp::seeded(
        splits.train.feature_dim(),
        hidden,
        vec![HeadSpec::new(HEAD_NAME, width, head_activation)],
        config.seed ^ MODEL_SALT,
    )?;

    let target_count = if task == TaskKind::Regression {
        width
    } else {
        0
    };
    let mut state = LossState::new(config, task, target_count)?;
    let sigma_groups: Vec<String> = if state.variances.is_empty() {
        vec![]
    } else {
        state.groups.iter().map(|g| g.name.clone()).collect()
    };
    let mut trace = RunTrace::new(sigma_groups, metric_names(task));

    let lr_schedule = LrSchedule::new(
        config.train.lr_start,
        config.train.lr_end,
        config.train.decay_steps,
    )?;
    let n_model_params = model.num_params();
    let mut params = model.flatten_params();
    params.extend(state.variances.iter().map(|v| v.log_value()));
    let mut optimizer = OptimizerState::new(params.len());
    let mut stream = BatchStream::new(splits.train.len(), config.seed ^ BATCH_SALT);

    if config.train.steps == 0 {
        // Evaluate the initial model only; the loss is computed on one
        // batch without touching any state.
        let started = Instant::now();
        let indices = stream.next_batch(config.train.batch.min(splits.train.len()));
        let features = gather_features(&splits.train.features, &indices);
        let pass = model.forward(&features)?;
        let outputs = pass
            .head(&model, HEAD_NAME)
            .expect("model has the head")
            .clone();
        let mut probe_state = LossState::new(config, task, target_count)?;
        let loss = evaluate_loss(
            config,
            &mut probe_state,
            &outputs,
            &splits.train.labels,
            &indices,
        )?;
        let validation = evaluate_split(
            &model,
            &splits.validation,
            task,
            &state,
            config.loss.normalization,
        )?;
        push_record(
            &mut trace,
            config,
            task,
            0,
            lr_schedule.rate(0),
            &loss,
            &state,
            Some(validation),
            started.elapsed().as_secs_f64(),
        )?;
    }

    let mut last_good: Option<(u64, f64)> = None;
    for step in 0..config.train.steps {
        let started = Instant::now();
        let lr = lr_schedule.rate(step);
        let indices = stream.next_batch(config.train.batch);
        let features = gather_features(&splits.train.features, &indices);
        let pass = model.forward(&features)?;
        let outputs = pass
            .head(&model, HEAD_NAME)
            .expect("model has the head")
            .clone();
        let loss = evaluate_loss(config, &mut state, &outputs, &splits.train.labels, &indices)?;
        let objective = losses::weighted_sum_loss(&[(loss.total, config.loss.weight)]);
        if !objective.is_finite() {
            let diag = match last_good {
                Some((s, l)) => {
                    format!("step {step}: loss {objective}; last good step {s} had loss {l}")
                }
                None => format!("step {step}: loss {objective} on the first step"),
            };
            return Err(Error::NonFiniteLoss(diag));
        }

        let head_grad = loss.grad_wrt_outputs.map(|g| g * config.loss.weight);
        let mut grads = model.backward(&pass, &[(HEAD_NAME, &head_grad)])?;
        grads.extend(
            loss.grad_wrt_variance
                .iter()
                .map(|g| g * config.loss.weight),
        );
        optimizer.step(&mut params, &grads, lr)?;
        model.assign_params(&params[..n_model_params])?;
        for (variance, &s) in state.variances.iter_mut().zip(&params[n_model_params..]) {
            *variance = TaskVariance::from_log(s)?;
        }

        let is_last = step + 1 == config.train.steps;
        let validation = if step % config.train.eval_every == 0 || is_last {
            Some(evaluate_split(
                &model,
                &splits.validation,
                task,
                &state,
                config.loss.normalization,
            )?)
        } else {
            None
        };
        push_record(
            &mut trace,
            config,
            task,
            step,
            lr,
            &loss,
            &state,
            validation,
            started.elapsed().as_secs_f64(),
        )?;
        last_good = Some((step, objective));
    }

    // Emit artifacts.
    let mut trace_file = std::fs::File::create(&trace_path)?;
    trace.to_csv(&mut trace_file)?;
    let mut ckpt = std::fs::File::create(out_dir.join("model.ckpt"))?;
    model.save(&mut ckpt)?;

    let final_metrics: Vec<(String, f64)> = metric_names(task)
        .into_iter()
        .zip(evaluate_split(
            &model,
            &splits.test,
            task,
            &state,
            config.loss.normalization,
        )?)
        .collect();
    let convergence = match &config.convergence {
        Some(c) => convergence_step(&trace, &c.metric, c.threshold, c.patience)?,
        None => None,
    };

    write_summary(out_dir, config, &trace, &final_metrics, convergence)?;
    if config.plots {
        write_plots(out_dir, &trace)?;
    }

    Ok(RunArtifacts {
        trace,
        model,
        variances: state.variances,
        final_metrics,
        convergence,
    })
}

#[allow(clippy::too_many_arguments)]
fn push_record(
    trace: &mut RunTrace,
    config: &ExperimentConfig,
    task: TaskKind,
    step: u64,
    lr: f64,
    loss: &LossOutput,
    state: &LossState,
    validation: Option<Vec<f64>>,
    wall_clock: f64,
) -> Result<()> {
    let objective = losses::weighted_sum_loss(&[(loss.total, config.loss.weight)]);
    let p_hat = match &state.tracker {
        Some(tracker) => tracker
            .smoothed()
            .map(|p| p.value())
            .or(loss.diagnostics.batch_mean_p_correct)
            .unwrap_or(0.0),
        None => loss.diagnostics.batch_mean_p_correct.unwrap_or(0.0),
    };
    trace.push(TraceRecord {
        step,
        lr,
        loss_total: objective,
        loss_cls: if task == TaskKind::Regression {
            0.0
        } else {
            loss.total
        },
        loss_reg: if task == TaskKind::Regression {
            loss.total
        } else {
            0.0
        },
        gamma: loss.diagnostics.gamma.unwrap_or(0.0),
        p_hat,
        sigma2: state.sigma2_values(),
        validation,
        wall_clock,
    })
}

fn write_summary(
    out_dir: &Path,
    config: &ExperimentConfig,
    trace: &RunTrace,
    final_metrics: &[(String, f64)],
    convergence: Option<u64>,
) -> Result<()> {
    let mut f = std::fs::File::create(out_dir.join("summary.txt"))?;
    writeln!(f, "label = {}", config.loss.label())?;
    writeln!(f, "seed = {}", config.seed)?;
    writeln!(f, "steps = {}", config.train.steps)?;
    for (name, value) in final_metrics {
        writeln!(f, "final.{name} = {value:.6}")?;
    }
    if let Some(c) = &config.convergence {
        writeln!(f, "convergence.metric = {}", c.metric)?;
        writeln!(f, "convergence.threshold = {}", c.threshold)?;
        match convergence {
            Some(step) => writeln!(f, "convergence.step = {step}")?,
            None => writeln!(f, "convergence.step = never")?,
        }
    }
    if let Some(last) = trace.records().last() {
        writeln!(f, "final.gamma = {:.6}", last.gamma)?;
        writeln!(f, "final.p_hat = {:.6}", last.p_hat)?;
        for (group, sigma2) in trace.sigma_groups.iter().zip(&last.sigma2) {
            writeln!(f, "final.sigma2.{group} = {sigma2:.6}")?;
        }
    }
    Ok(())
}

fn write_plots(out_dir: &Path, trace: &RunTrace) -> Result<()> {
    let steps: Vec<f64> = trace.records().iter().map(|r| r.step as f64).collect();
    let curve = |f: &dyn Fn(&TraceRecord) -> f64| -> Vec<(f64, f64)> {
        steps
            .iter()
            .zip(trace.records())
            .map(|(&s, r)| (s, f(r)))
            .collect()
    };
    let loss = curve(&|r| r.loss_total);
    svg::write_line_plot(
        out_dir.join("loss.svg"),
        "Training loss",
        "step",
        "loss",
        &[svg::Series {
            name: "loss_total",
            points: &loss,
        }],
    )?;
    let gamma = curve(&|r| r.gamma);
    svg::write_line_plot(
        out_dir.join("gamma.svg"),
        "Focus exponent",
        "step",
        "gamma",
        &[svg::Series {
            name: "gamma",
            points: &gamma,
        }],
    )?;
    let p_hat = curve(&|r| r.p_hat);
    svg::write_line_plot(
        out_dir.join("p_hat.svg"),
        "Training progress",
        "step",
        "p_hat",
        &[svg::Series {
            name: "p_hat",
            points: &p_hat,
        }],
    )?;
    Ok(())
}

/// One row of a comparison report.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub final_metrics: Vec<(String, f64)>,
    pub convergence: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

/// Runs several configs that differ only in their loss settings, under one
/// shared seed/data/model/budget, and writes `comparison.csv` plus a
/// human-readable `comparison.txt`.
pub fn compare(configs: &[ExperimentConfig], out_dir: &Path) -> Result<CompareReport> {
    if configs.is_empty() {
        return Err(Error::Config("compare needs at least one config".into()));
    }
    for (i, config) in configs.iter().enumerate().skip(1) {
        if config.shared_part() != configs[0].shared_part() {
            return Err(Error::Config(format!(
                "config {} differs from the first config outside the loss section",
                i + 1
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;

    let mut rows = Vec::with_capacity(configs.len());
    for (i, config) in configs.iter().enumerate() {
        let label = config.loss.label();
        let dir_name = format!("run-{}-{}", i + 1, label.replace(['/', ':'], "-"));
        let artifacts = run(config, &out_dir.join(dir_name))?;
        rows.push(CompareRow {
            label,
            final_metrics: artifacts.final_metrics,
            convergence: artifacts.convergence,
        });
    }

    let metric_names: Vec<&str> = rows[0]
        .final_metrics
        .iter()
        .map(|(n, _)| n.as_str())
        .collect();
    let mut csv = std::fs::File::create(out_dir.join("comparison.csv"))?;
    writeln!(csv, "loss,{},convergence_step", metric_names.join(","))?;
    for row in &rows {
        let values: Vec<String> = row
            .final_metrics
            .iter()
            .map(|(_, v)| format!("{v:.16e}"))
            .collect();
        let conv = row.convergence.map_or(String::new(), |s| s.to_string());
        writeln!(csv, "{},{},{}", row.label, values.join(","), conv)?;
    }

    let mut txt = std::fs::File::create(out_dir.join("comparison.txt"))?;
    writeln!(
        txt,
        "{:<40} {}  convergence",
        "loss",
        metric_names.join("  ")
    )?;
    for row in &rows {
        let values: Vec<String> = row
            .final_metrics
            .iter()
            .map(|(n, v)| format!("{}={v:.4}", n))
            .collect();
        let conv = row
            .convergence
            .map_or("never".to_string(), |s| s.to_string());
        writeln!(txt, "{:<40} {}  {}", row.label, values.join("  "), conv)?;
    }

    Ok(CompareReport { rows })
}

/// Evaluates a gamma schedule over a grid of progress values.
pub fn gamma_trace(schedule: &GammaSchedule, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    let mut rows = Vec::with_capacity(grid.len());
    for &p in grid {
        if !(0.0 < p && p < 1.0) {
            return Err(Error::Domain(format!(
                "gamma-trace grid values must lie in (0, 1), got {p}"
            )));
        }
        let pc = crate::focal::CorrectProbability::new(p)?;
        rows.push((p, schedule.gamma(pc)));
    }
    Ok(rows)
}

/// Writes a gamma trace as `p_hat,gamma` CSV (plus an optional plot).
pub fn write_gamma_trace(out_dir: &Path, rows: &[(f64, f64)], plot: bool) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let mut f = std::fs::File::create(out_dir.join("gamma_trace.csv"))?;
    writeln!(f, "p_hat,gamma")?;
    for &(p, g) in rows {
        writeln!(f, "{p:.16e},{g:.16e}")?;
    }
    if plot {
        svg::write_line_plot(
            out_dir.join("gamma_trace.svg"),
            "Gamma schedule",
            "p_hat",
            "gamma",
            &[svg::Series {
                name: "gamma",
                points: rows,
            }],
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_dir(name: &str) -> PathBuf {
        let dir =
            std::env::temp_dir().join(format!("autofocal-harness-{}-{name}", std::process::id()));
        if dir.exists() {
            std::fs::remove_dir_all(&dir).unwrap();
        }
        dir
    }

    const SMALL_CLS: &str = "
        seed = 3
        data.kind = imbalanced-blobs
        data.samples = 400
        data.ratio = 4
        loss.kind = focal-classification
        loss.schedule = shannon-info
        train.steps = 40
        train.batch = 16
        train.eval-every = 10
        eval.metric = macro_f1
        eval.threshold = 0.5
        eval.patience = 2
    ";

    #[test]
    fn parse_full_config() {
        let config = ExperimentConfig::parse(SMALL_CLS).unwrap();
        assert_eq!(config.seed, 3);
        assert_eq!(config.data.kind, DatasetKind::ImbalancedBlobs);
        assert_eq!(config.data.samples, 400);
        assert_eq!(config.train.steps, 40);
        assert_eq!(config.loss.kind, LossKind::FocalClassification);
        assert!(config.loss.schedule.is_some());
        assert_eq!(config.loss.weight, 10.0);
        assert_eq!(config.convergence.as_ref().unwrap().patience, 2);
        assert_eq!(config.loss.label(), "focal-classification/shannon-info");
    }

    #[test]
    fn parse_rejects_inconsistent_schedules() {
        // h without quantile.
        let bad = "
            seed = 1
            data.kind = imbalanced-blobs
            data.samples = 100
            loss.kind = focal-classification
            loss.schedule = shannon-info
            loss.h = 0.7
        ";
        assert!(ExperimentConfig::parse(bad).is_err());
        // quantile without h.
        let bad = bad
            .replace("loss.schedule = shannon-info", "loss.schedule = quantile")
            .replace("loss.h = 0.7", "");
        assert!(ExperimentConfig::parse(&bad).is_err());
        // schedule on a non-focal loss.
        let bad = "
            seed = 1
            data.kind = imbalanced-blobs
            data.samples = 100
            loss.kind = cross-entropy
            loss.schedule = shannon-info
        ";
        assert!(ExperimentConfig::parse(bad).is_err());
        // focal loss without schedule.
        let bad = "
            seed = 1
            data.kind = imbalanced-blobs
            data.samples = 100
            loss.kind = focal-classification
        ";
        assert!(ExperimentConfig::parse(bad).is_err());
        // gamma on quantile.
        let bad = "
            seed = 1
            data.kind = imbalanced-blobs
            data.samples = 100
            loss.kind = focal-classification
            loss.schedule = quantile
            loss.h = 0.7
            loss.gamma = 2.0
        ";
        assert!(ExperimentConfig::parse(bad).is_err());
    }

    #[test]
    fn parse_rejects_unknown_and_duplicate_keys() {
        let bad = "
            seed = 1
            data.kind = imbalanced-blobs
            data.samples = 100
            loss.kind = cross-entropy
            loss.typo = 7
        ";
        let err = ExperimentConfig::parse(bad).unwrap_err().to_string();
        assert!(err.contains("loss.typo"), "{err}");

        let bad = "
            seed = 1
            seed = 2
            data.kind = imbalanced-blobs
            data.samples = 100
            loss.kind = cross-entropy
        ";
        assert!(ExperimentConfig::parse(bad).is_err());
    }

    #[test]
    fn gamma_trace_examples() {
        let info = GammaSchedule::shannon_info();
        let rows = gamma_trace(&info, &[(-1.0f64).exp()]).unwrap();
        assert!((rows[0].1 - 1.0).abs() < 1e-12);

        // Lower h focuses harder everywhere on the grid.
        let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let low = gamma_trace(&GammaSchedule::quantile(0.7).unwrap(), &grid).unwrap();
        let high = gamma_trace(&GammaSchedule::quantile(0.9).unwrap(), &grid).unwrap();
        for (a, b) in low.iter().zip(&high) {
            assert!(a.1 >= b.1, "h=0.7 below h=0.9 at p={}", a.0);
        }
        // Both schedules decrease along an increasing grid.
        for rows in [&low, &high] {
            for pair in rows.windows(2) {
                assert!(pair[0].1 >= pair[1].1);
            }
        }

        assert!(gamma_trace(&info, &[0.0]).is_err());
        assert!(gamma_trace(&info, &[1.0]).is_err());
    }

    #[test]
    fn zero_budget_run_evaluates_initial_model() {
        let config =
            ExperimentConfig::parse(&SMALL_CLS.replace("train.steps = 40", "train.steps = 0"))
                .unwrap();
        let dir = test_dir("zero-budget");
        let artifacts = run(&config, &dir).unwrap();
        assert_eq!(artifacts.trace.records().len(), 1);
        assert_eq!(artifacts.trace.records()[0].step, 0);
        assert!(artifacts.trace.records()[0].validation.is_some());
        assert!(dir.join("trace.csv").exists());
        assert!(dir.join("summary.txt").exists());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn identical_runs_emit_identical_traces() {
        let config = ExperimentConfig::parse(SMALL_CLS).unwrap();
        let dir_a = test_dir("det-a");
        let dir_b = test_dir("det-b");
        run(&config, &dir_a).unwrap();
        run(&config, &dir_b).unwrap();
        let a = std::fs::read(dir_a.join("trace.csv")).unwrap();
        let b = std::fs::read(dir_b.join("trace.csv")).unwrap();
        assert_eq!(a, b);
        std::fs::remove_dir_all(&dir_a).unwrap();
        std::fs::remove_dir_all(&dir_b).unwrap();
    }

    #[test]
    fn emitted_trace_parses_back() {
        let config = ExperimentConfig::parse(SMALL_CLS).unwrap();
        let dir = test_dir("parse-back");
        let artifacts = run(&config, &dir).unwrap();
        let text = std::fs::read(dir.join("trace.csv")).unwrap();
        let parsed = RunTrace::from_csv(std::io::Cursor::new(text)).unwrap();
        assert_eq!(parsed.records().len(), artifacts.trace.records().len());
        assert_eq!(parsed.metric_names, artifacts.trace.metric_names);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn run_emits_plots_when_asked() {
        let config = ExperimentConfig::parse(&format!("{SMALL_CLS}\noutput.plots = true")).unwrap();
        let dir = test_dir("plots");
        run(&config, &dir).unwrap();
        for name in ["loss.svg", "gamma.svg", "p_hat.svg"] {
            assert!(dir.join(name).exists(), "{name} missing");
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn loss_and_dataset_must_be_compatible() {
        let bad = "
            seed = 1
            data.kind = noisy-regression
            data.samples = 100
            loss.kind = cross-entropy
            train.steps = 1
        ";
        let config = ExperimentConfig::parse(bad).unwrap();
        let dir = test_dir("mismatch");
        assert!(run(&config, &dir).is_err());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn compare_rejects_mismatched_shared_parts() {
        let a = ExperimentConfig::parse(SMALL_CLS).unwrap();
        let mut b = a.clone();
        b.data.samples = 500;
        let dir = test_dir("compare-mismatch");
        assert!(compare(&[a, b], &dir).is_err());
        if dir.exists() {
            std::fs::remove_dir_all(&dir).unwrap();
        }
    }

    #[test]
    fn compare_produces_one_row_per_config_and_identical_rows_for_identical_configs() {
        let a = ExperimentConfig::parse(SMALL_CLS).unwrap();
        let b = a.clone();
        let dir = test_dir("compare-rows");
        let report = compare(&[a.clone(), b], &dir).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0], report.rows[1]);
        assert!(dir.join("comparison.csv").exists());
        assert!(dir.join("comparison.txt").exists());
        // The report carries the imbalance-relevant column.
        let csv = std::fs::read_to_string(dir.join("comparison.csv")).unwrap();
        assert!(csv.lines().next().unwrap().contains("minority_recall"));
        assert_eq!(csv.lines().count(), 3); // header + one row per config

        // A genuinely different loss produces a distinct row label.
        let mut c = a.clone();
        c.loss = LossConfig {
            kind: LossKind::CrossEntropy,
            schedule: None,
            base: BaseLoss::L2,
            normalization: VarianceNormalization::Squared,
            sigma2_init: 1.0,
            smoothing: 0.95,
            policy: None,
            weight: 10.0,
        };
        std::fs::remove_dir_all(&dir).unwrap();
        let report = compare(&[a, c], &dir).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_ne!(report.rows[0].label, report.rows[1].label);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn multilabel_run_trains_with_multi_target_policy() {
        let text = "
            seed = 5
            data.kind = multilabel-synthetic
            data.samples = 300
            data.classes = 3
            data.ratio = 3
            loss.kind = focal-classification
            loss.schedule = shannon-info
            loss.policy = multi-positive
            train.steps = 25
            train.batch = 16
            train.eval-every = 10
        ";
        let config = ExperimentConfig::parse(text).unwrap();
        let dir = test_dir("multilabel");
        let artifacts = run(&config, &dir).unwrap();
        assert_eq!(artifacts.trace.records().len(), 25);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn regression_run_tracks_variances() {
        let text = "
            seed = 6
            data.kind = noisy-regression
            data.samples = 400
            data.sigma = 0.4
            loss.kind = focal-regression
            loss.schedule = shannon-info
            train.steps = 30
            train.batch = 16
            train.eval-every = 10
        ";
        let config = ExperimentConfig::parse(text).unwrap();
        let dir = test_dir("regression");
        let artifacts = run(&config, &dir).unwrap();
        assert_eq!(artifacts.variances.len(), 1);
        assert_eq!(artifacts.trace.sigma_groups, vec!["t0".to_string()]);
        let record = &artifacts.trace.records()[0];
        assert_eq!(record.sigma2.len(), 1);
        // mse and p_correct metrics exist.
        assert_eq!(
            artifacts.trace.metric_names,
            vec!["mse".to_string(), "p_correct".to_string()]
        );
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
