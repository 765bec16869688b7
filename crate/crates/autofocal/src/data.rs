//! Synthetic desk-scale datasets with controllable imbalance and label
//! noise, plus CSV ingestion and export.
//!
//! Generation is pure given the spec (which carries its own seed): the same
//! spec always yields byte-identical splits. Class counts are computed
//! exactly from the imbalance ratio rather than sampled, so the emitted
//! ratio matches the requested one up to rounding.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};
use crate::mat::Matrix;

/// Split fractions for train/validation/test.
pub const TRAIN_FRACTION: f64 = 0.7;
pub const VALIDATION_FRACTION: f64 = 0.15;

// Decouples the split shuffle from the sample-generation stream.
const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// What to generate or load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Gaussian class blobs with a majority:minority imbalance.
    ImbalancedBlobs,
    /// Multi-target binary masks over prototype features.
    MultilabelSynthetic,
    /// Real targets = ground-truth function + Gaussian noise + optional
    /// gross outliers.
    NoisyRegression,
    /// External tabular data; needs `path` and `schema`.
    CsvFile,
}

/// Ground-truth function family for regression data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroundTruth {
    Affine,
    Sinusoidal,
}

/// Declarative description of a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub samples: usize,
    /// Class count (blobs) or label count (multilabel).
    pub classes: usize,
    /// Regression target count.
    pub targets: usize,
    /// Majority:minority ratio, `>= 1`.
    pub imbalance_ratio: f64,
    /// Distance between class centers (blobs) in units of the blob standard
    /// deviation, or prototype scale (multilabel).
    pub separation: f64,
    pub feature_dim: usize,
    /// Label-noise standard deviation per regression target; a single entry
    /// broadcasts to all targets.
    pub noise_sigma: Vec<f64>,
    /// Fraction of regression label elements further corrupted.
    pub outlier_fraction: f64,
    /// Magnitude added (with random sign) to corrupted labels.
    pub outlier_magnitude: f64,
    pub ground_truth: GroundTruth,
    pub seed: u64,
    /// Source file for [`DatasetKind::CsvFile`].
    pub path: Option<PathBuf>,
    /// Column roles for [`DatasetKind::CsvFile`].
    pub schema: Option<CsvSchema>,
}

impl DatasetSpec {
    pub fn blobs(samples: usize, classes: usize, imbalance_ratio: f64, seed: u64) -> Self {
        Self {
            kind: DatasetKind::ImbalancedBlobs,
            samples,
            classes,
            targets: 1,
            imbalance_ratio,
            separation: 4.0,
            feature_dim: 2,
            noise_sigma: vec![0.0],
            outlier_fraction: 0.0,
            outlier_magnitude: 0.0,
            ground_truth: GroundTruth::Affine,
            seed,
            path: None,
            schema: None,
        }
    }

    pub fn multilabel(samples: usize, labels: usize, imbalance_ratio: f64, seed: u64) -> Self {
        Self {
            kind: DatasetKind::MultilabelSynthetic,
            classes: labels,
            feature_dim: 2 * labels,
            ..Self::blobs(samples, labels, imbalance_ratio, seed)
        }
    }

    pub fn noisy_regression(samples: usize, targets: usize, sigma: f64, seed: u64) -> Self {
        Self {
            kind: DatasetKind::NoisyRegression,
            targets,
            feature_dim: 1,
            noise_sigma: vec![sigma],
            imbalance_ratio: 1.0,
            ..Self::blobs(samples, 2, 1.0, seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Data("sample count must be positive".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Data("feature dimension must be positive".into()));
        }
        if !(self.imbalance_ratio.is_finite() && self.imbalance_ratio >= 1.0) {
            return Err(Error::Data(format!(
                "imbalance ratio must be >= 1, got {}",
                self.imbalance_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Data(format!(
                "outlier fraction must lie in [0, 1), got {}",
                self.outlier_fraction
            )));
        }
        match self.kind {
            DatasetKind::ImbalancedBlobs | DatasetKind::MultilabelSynthetic => {
                if self.classes < 2 {
                    return Err(Error::Data("need at least two classes/labels".into()));
                }
            }
            DatasetKind::NoisyRegression => {
                if self.targets == 0 {
                    return Err(Error::Data("need at least one regression target".into()));
                }
                if self.noise_sigma.len() != 1 && self.noise_sigma.len() != self.targets {
                    return Err(Error::Data(format!(
                        "{} noise sigmas for {} targets",
                        self.noise_sigma.len(),
                        self.targets
                    )));
                }
                if self.noise_sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
                    return Err(Error::Data("noise sigma must be non-negative".into()));
                }
            }
            DatasetKind::CsvFile => {
                if self.path.is_none() || self.schema.is_none() {
                    return Err(Error::Data(
                        "csv-file datasets need both a path and a schema".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn sigma_for(&self, target: usize) -> f64 {
        if self.noise_sigma.len() == 1 {
            self.noise_sigma[0]
        } else {
            self.noise_sigma[target]
        }
    }
}

/// Labels of a dataset, matching the spec kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Class(Vec<usize>),
    Mask { data: Vec<bool>, classes: usize },
    Real(Matrix),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Class(v) => v.len(),
            Labels::Mask { data, classes } => data.len() / classes,
            Labels::Real(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One sample in row form.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: SampleLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleLabel {
    Class(usize),
    Mask(Vec<bool>),
    Real(Vec<f64>),
}

/// A feature matrix plus labels, with optional noiseless targets and
/// outlier flags for generated regression data.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Labels,
    /// Ground-truth targets before noise, for generated regression data.
    pub clean_targets: Option<Matrix>,
    /// Which label elements were corrupted, flat row-major.
    pub outlier_mask: Option<Vec<bool>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> Sample {
        let label = match &self.labels {
            Labels::Class(v) => SampleLabel::Class(v[i]),
            Labels::Mask { data, classes } => {
                SampleLabel::Mask(data[i * classes..(i + 1) * classes].to_vec())
            }
            Labels::Real(m) => SampleLabel::Real(m.row(i).to_vec()),
        };
        Sample {
            features: self.features.row(i).to_vec(),
            label,
        }
    }

    fn take(&self, indices: &[usize]) -> Dataset {
        let dim = self.feature_dim();
        let mut features = Matrix::zeros(indices.len(), dim);
        for (row, &i) in indices.iter().enumerate() {
            features.row_mut(row).copy_from_slice(self.features.row(i));
        }
        let labels = match &self.labels {
            Labels::Class(v) => Labels::Class(indices.iter().map(|&i| v[i]).collect()),
            Labels::Mask { data, classes } => Labels::Mask {
                data: indices
                    .iter()
                    .flat_map(|&i| data[i * classes..(i + 1) * classes].iter().copied())
                    .collect(),
                classes: *classes,
            },
            Labels::Real(m) => {
                let mut out = Matrix::zeros(indices.len(), m.cols());
                for (row, &i) in indices.iter().enumerate() {
                    out.row_mut(row).copy_from_slice(m.row(i));
                }
                Labels::Real(out)
            }
        };
        let clean_targets = self.clean_targets.as_ref().map(|m| {
            let mut out = Matrix::zeros(indices.len(), m.cols());
            for (row, &i) in indices.iter().enumerate() {
                out.row_mut(row).copy_from_slice(m.row(i));
            }
            out
        });
        let outlier_mask = self.outlier_mask.as_ref().map(|mask| {
            let t = mask.len() / self.len();
            indices
                .iter()
                .flat_map(|&i| mask[i * t..(i + 1) * t].iter().copied())
                .collect()
        });
        Dataset {
            features,
            labels,
            clean_targets,
            outlier_mask,
        }
    }
}

/// Train/validation/test partition.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

fn normal(rng: &mut StdRng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Exact per-class counts for the requested imbalance: class 0 carries
/// `ratio` units of weight, every other class one unit. Largest-remainder
/// rounding keeps the total exact.
fn class_counts(samples: usize, classes: usize, ratio: f64) -> Result<Vec<usize>> {
    let weights: Vec<f64> = std::iter::once(ratio)
        .chain(std::iter::repeat_n(1.0, classes - 1))
        .collect();
    let total_weight: f64 = weights.iter().sum();
    let ideal: Vec<f64> = weights
        .iter()
        .map(|w| samples as f64 * w / total_weight)
        .collect();
    let mut counts: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().take(samples - assigned) {
        counts[c] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::Data(format!(
            "infeasible spec: a class count rounds to zero ({samples} samples at ratio {ratio})"
        )));
    }
    Ok(counts)
}

/// Generates train/validation/test splits for a spec. Deterministic under
/// the spec's seed.
pub fn generate(spec: &DatasetSpec) -> Result<Splits> {
    let full = generate_full(spec)?;
    Ok(split_dataset(&full, spec.seed))
}

/// Shuffled 70/15/15 partition, deterministic under the seed.
pub fn split_dataset(full: &Dataset, seed: u64) -> Splits {
    let mut rng = StdRng::seed_from_u64(seed ^ SPLIT_SALT);
    let mut indices: Vec<usize> = (0..full.len()).collect();
    shuffle(&mut indices, &mut rng);
    let n_train = (full.len() as f64 * TRAIN_FRACTION).round() as usize;
    let n_val = (full.len() as f64 * VALIDATION_FRACTION).round() as usize;
    let n_train = n_train.min(full.len());
    let n_val = n_val.min(full.len() - n_train);
    Splits {
        train: full.take(&indices[..n_train]),
        validation: full.take(&indices[n_train..n_train + n_val]),
        test: full.take(&indices[n_train + n_val..]),
    }
}

/// Generates (or loads) the whole dataset before splitting.
pub fn generate_full(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = StdRng::seed_from_u64(spec.seed);
    match spec.kind {
        DatasetKind::ImbalancedBlobs => generate_blobs(spec, &mut rng),
        DatasetKind::MultilabelSynthetic => generate_multilabel(spec, &mut rng),
        DatasetKind::NoisyRegression => generate_regression(spec, &mut rng),
        DatasetKind::CsvFile => load_csv(
            spec.path.as_ref().expect("validated"),
            spec.schema.as_ref().expect("validated"),
        ),
    }
}

fn shuffle(indices: &mut [usize], rng: &mut StdRng) {
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

/// Class `c` center: the origin for the majority, `separation` along the
/// `(c-1) % dim` axis for the others (scaled up on each wrap so centers
/// stay distinct when classes outnumber dimensions).
fn blob_center(class: usize, dim: usize, separation: f64) -> Vec<f64> {
    let mut center = vec![0.0; dim];
    if class > 0 {
        let axis = (class - 1) % dim;
        let level = 1.0 + ((class - 1) / dim) as f64;
        center[axis] = separation * level;
    }
    center
}

fn generate_blobs(spec: &DatasetSpec, rng: &mut StdRng) -> Result<Dataset> {
    let counts = class_counts(spec.samples, spec.classes, spec.imbalance_ratio)?;
    let mut features = Matrix::zeros(spec.samples, spec.feature_dim);
    let mut labels = Vec::with_capacity(spec.samples);
    let mut row = 0;
    for (class, &count) in counts.iter().enumerate() {
        let center = blob_center(class, spec.feature_dim, spec.separation);
        for _ in 0..count {
            for (j, &c) in center.iter().enumerate() {
                features.set(row, j, c + normal(rng));
            }
            labels.push(class);
            row += 1;
        }
    }
    Ok(Dataset {
        features,
        labels: Labels::Class(labels),
        clean_targets: None,
        outlier_mask: None,
    })
}

fn generate_multilabel(spec: &DatasetSpec, rng: &mut StdRng) -> Result<Dataset> {
    // Per-label prototype directions; features superpose the prototypes of
    // the active labels plus noise.
    let mut prototypes = Matrix::zeros(spec.classes, spec.feature_dim);
    for v in prototypes.as_mut_slice() {
        *v = normal(rng) * spec.separation / 2.0;
    }
    let p_active = 1.0 / (1.0 + spec.imbalance_ratio);
    let mut features = Matrix::zeros(spec.samples, spec.feature_dim);
    let mut mask = Vec::with_capacity(spec.samples * spec.classes);
    for i in 0..spec.samples {
        let active: Vec<bool> = (0..spec.classes).map(|_| rng.gen_bool(p_active)).collect();
        for j in 0..spec.feature_dim {
            let mut x = 0.5 * normal(rng);
            for (l, &a) in active.iter().enumerate() {
                if a {
                    x += prototypes.get(l, j);
                }
            }
            features.set(i, j, x);
        }
        mask.extend_from_slice(&active);
    }
    Ok(Dataset {
        features,
        labels: Labels::Mask {
            data: mask,
            classes: spec.classes,
        },
        clean_targets: None,
        outlier_mask: None,
    })
}

fn generate_regression(spec: &DatasetSpec, rng: &mut StdRng) -> Result<Dataset> {
    // Ground-truth function coefficients, deterministic under the seed.
    let dim = spec.feature_dim;
    let targets = spec.targets;
    let coeff: Vec<f64> = (0..targets * dim)
        .map(|_| rng.gen_range(-1.5..1.5))
        .collect();
    let intercept: Vec<f64> = (0..targets).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let phase: Vec<f64> = (0..targets)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();

    let eval = |x: &[f64], t: usize| -> f64 {
        let lin: f64 = (0..dim).map(|j| coeff[t * dim + j] * x[j]).sum();
        match spec.ground_truth {
            GroundTruth::Affine => lin + intercept[t],
            GroundTruth::Sinusoidal => (lin + phase[t]).sin(),
        }
    };

    let mut features = Matrix::zeros(spec.samples, dim);
    let mut clean = Matrix::zeros(spec.samples, targets);
    let mut labels = Matrix::zeros(spec.samples, targets);
    let mut outliers = vec![false; spec.samples * targets];
    for i in 0..spec.samples {
        for j in 0..dim {
            features.set(i, j, rng.gen_range(-2.0..2.0));
        }
        for t in 0..targets {
            let g = eval(features.row(i), t);
            clean.set(i, t, g);
            let mut y = g + spec.sigma_for(t) * normal(rng);
            if spec.outlier_fraction > 0.0 && rng.gen_bool(spec.outlier_fraction) {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                y += sign * spec.outlier_magnitude;
                outliers[i * targets + t] = true;
            }
            labels.set(i, t, y);
        }
    }
    Ok(Dataset {
        features,
        labels: Labels::Real(labels),
        clean_targets: Some(clean),
        outlier_mask: Some(outliers),
    })
}

/// Role of one CSV column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnRole {
    Feature,
    ClassLabel,
    MaskBit,
    Target,
    CleanTarget,
    OutlierFlag,
}

impl ColumnRole {
    fn parse(token: &str) -> Result<Self> {
        match token {
            "f" => Ok(ColumnRole::Feature),
            "class" => Ok(ColumnRole::ClassLabel),
            "m" => Ok(ColumnRole::MaskBit),
            "t" => Ok(ColumnRole::Target),
            "ct" => Ok(ColumnRole::CleanTarget),
            "o" => Ok(ColumnRole::OutlierFlag),
            other => Err(Error::Data(format!(
                "unknown column role '{other}' (expected f, class, m, t, ct or o)"
            ))),
        }
    }

    fn token(self) -> &'static str {
        match self {
            ColumnRole::Feature => "f",
            ColumnRole::ClassLabel => "class",
            ColumnRole::MaskBit => "m",
            ColumnRole::Target => "t",
            ColumnRole::CleanTarget => "ct",
            ColumnRole::OutlierFlag => "o",
        }
    }
}

/// Column roles of a dataset CSV, e.g. `f,f,class`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub roles: Vec<ColumnRole>,
}

impl CsvSchema {
    pub fn parse(text: &str) -> Result<Self> {
        let roles = text
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(ColumnRole::parse)
            .collect::<Result<Vec<_>>>()?;
        let schema = Self { roles };
        schema.validate()?;
        Ok(schema)
    }

    fn count(&self, role: ColumnRole) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    fn validate(&self) -> Result<()> {
        if self.count(ColumnRole::Feature) == 0 {
            return Err(Error::Data(
                "schema needs at least one feature column".into(),
            ));
        }
        let class = self.count(ColumnRole::ClassLabel);
        let mask = self.count(ColumnRole::MaskBit);
        let target = self.count(ColumnRole::Target);
        let kinds = [class.min(1), mask.min(1), target.min(1)];
        if kinds.iter().sum::<usize>() != 1 {
            return Err(Error::Data(
                "schema must carry exactly one label kind (class, mask bits or targets)".into(),
            ));
        }
        if class > 1 {
            return Err(Error::Data("at most one class column".into()));
        }
        let clean = self.count(ColumnRole::CleanTarget);
        if clean != 0 && clean != target {
            return Err(Error::Data(format!(
                "{clean} clean-target columns for {target} targets"
            )));
        }
        let flags = self.count(ColumnRole::OutlierFlag);
        if flags != 0 && flags != target {
            return Err(Error::Data(format!(
                "{flags} outlier-flag columns for {target} targets"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for CsvSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tokens: Vec<&str> = self.roles.iter().map(|r| r.token()).collect();
        write!(f, "{}", tokens.join(","))
    }
}

/// Schema describing how [`write_csv`] lays out a dataset.
pub fn dataset_schema(dataset: &Dataset) -> CsvSchema {
    let mut roles = vec![ColumnRole::Feature; dataset.feature_dim()];
    match &dataset.labels {
        Labels::Class(_) => roles.push(ColumnRole::ClassLabel),
        Labels::Mask { classes, .. } => roles.extend(vec![ColumnRole::MaskBit; *classes]),
        Labels::Real(m) => {
            roles.extend(vec![ColumnRole::Target; m.cols()]);
            if dataset.clean_targets.is_some() {
                roles.extend(vec![ColumnRole::CleanTarget; m.cols()]);
            }
            if dataset.outlier_mask.is_some() {
                roles.extend(vec![ColumnRole::OutlierFlag; m.cols()]);
            }
        }
    }
    CsvSchema { roles }
}

/// Writes a dataset as CSV: UTF-8, comma separator, `.` decimal point, one
/// header row, one sample per row. Floats use the shortest representation
/// that parses back to the same value.
pub fn write_csv(dataset: &Dataset, mut w: impl Write) -> Result<CsvSchema> {
    let schema = dataset_schema(dataset);
    let mut header = Vec::new();
    let mut counters = std::collections::HashMap::new();
    for role in &schema.roles {
        if *role == ColumnRole::ClassLabel {
            header.push("class".to_string());
        } else {
            let counter = counters.entry(role.token()).or_insert(0usize);
            header.push(format!("{}{}", role.token(), counter));
            *counter += 1;
        }
    }
    writeln!(w, "{}", header.join(","))?;

    for i in 0..dataset.len() {
        let mut fields: Vec<String> = dataset.features.row(i).iter().map(f64::to_string).collect();
        match &dataset.labels {
            Labels::Class(v) => fields.push(v[i].to_string()),
            Labels::Mask { data, classes } => {
                fields.extend(
                    data[i * classes..(i + 1) * classes]
                        .iter()
                        .map(|&b| if b { "1" } else { "0" }.to_string()),
                );
            }
            Labels::Real(m) => {
                fields.extend(m.row(i).iter().map(f64::to_string));
                if let Some(clean) = &dataset.clean_targets {
                    fields.extend(clean.row(i).iter().map(f64::to_string));
                }
                if let Some(mask) = &dataset.outlier_mask {
                    let t = m.cols();
                    fields.extend(
                        mask[i * t..(i + 1) * t]
                            .iter()
                            .map(|&b| if b { "1" } else { "0" }.to_string()),
                    );
                }
            }
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(schema)
}

/// Loads a dataset from a CSV file; see [`load_csv_reader`].
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    load_csv_reader(std::io::BufReader::new(file), schema)
}

/// Parses CSV rows into a dataset under the declared column roles. The
/// first row is a header. Parse failures carry row and column numbers
/// (1-based, header included).
pub fn load_csv_reader(r: impl BufRead, schema: &CsvSchema) -> Result<Dataset> {
    schema.validate()?;
    let mut lines = r.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Err(Error::Data("empty file: expected a header row".into())),
    };
    let header_cols = header.split(',').count();
    if header_cols != schema.roles.len() {
        return Err(Error::Data(format!(
            "header has {header_cols} columns, schema declares {}",
            schema.roles.len()
        )));
    }

    let n_features = schema.count(ColumnRole::Feature);
    let n_mask = schema.count(ColumnRole::MaskBit);
    let n_targets = schema.count(ColumnRole::Target);
    let n_clean = schema.count(ColumnRole::CleanTarget);
    let n_flags = schema.count(ColumnRole::OutlierFlag);
    let has_class = schema.count(ColumnRole::ClassLabel) == 1;

    let mut features = Vec::new();
    let mut classes = Vec::new();
    let mut mask = Vec::new();
    let mut targets = Vec::new();
    let mut clean = Vec::new();
    let mut flags = Vec::new();
    let mut rows = 0usize;

    for (line_idx, line) in lines.enumerate() {
        let line = line?;
        let row_no = line_idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != schema.roles.len() {
            return Err(Error::Data(format!(
                "row {row_no}: {} fields, schema declares {} columns",
                fields.len(),
                schema.roles.len()
            )));
        }
        for (col, (&role, raw)) in schema.roles.iter().zip(&fields).enumerate() {
            let col_no = col + 1;
            let raw = raw.trim();
            match role {
                ColumnRole::Feature => features.push(parse_float(raw, row_no, col_no)?),
                ColumnRole::Target => targets.push(parse_float(raw, row_no, col_no)?),
                ColumnRole::CleanTarget => clean.push(parse_float(raw, row_no, col_no)?),
                ColumnRole::ClassLabel => classes.push(raw.parse::<usize>().map_err(|e| {
                    Error::Data(format!(
                        "row {row_no}, column {col_no}: bad class '{raw}': {e}"
                    ))
                })?),
                ColumnRole::MaskBit => mask.push(parse_bit(raw, row_no, col_no)?),
                ColumnRole::OutlierFlag => flags.push(parse_bit(raw, row_no, col_no)?),
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data("no data rows after the header".into()));
    }

    let labels = if has_class {
        Labels::Class(classes)
    } else if n_mask > 0 {
        Labels::Mask {
            data: mask,
            classes: n_mask,
        }
    } else {
        Labels::Real(Matrix::from_vec(rows, n_targets, targets))
    };
    Ok(Dataset {
        features: Matrix::from_vec(rows, n_features, features),
        labels,
        clean_targets: (n_clean > 0).then(|| Matrix::from_vec(rows, n_clean, clean)),
        outlier_mask: (n_flags > 0).then_some(flags),
    })
}

fn parse_float(raw: &str, row: usize, col: usize) -> Result<f64> {
    raw.parse::<f64>()
        .map_err(|e| Error::Data(format!("row {row}, column {col}: bad number '{raw}': {e}")))
}

fn parse_bit(raw: &str, row: usize, col: usize) -> Result<bool> {
    match raw {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Data(format!(
            "row {row}, column {col}: expected 0 or 1, got '{other}'"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_classes(labels: &Labels, classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; classes];
        if let Labels::Class(v) = labels {
            for &c in v {
                counts[c] += 1;
            }
        }
        counts
    }

    #[test]
    fn balanced_blobs_have_equal_counts() {
        let spec = DatasetSpec::blobs(1000, 2, 1.0, 7);
        let full = generate_full(&spec).unwrap();
        let counts = count_classes(&full.labels, 2);
        assert_eq!(counts[0] + counts[1], 1000);
        let ratio = counts[0] as f64 / counts[1] as f64;
        assert!((ratio - 1.0).abs() <= 0.05, "ratio {ratio}");
    }

    #[test]
    fn imbalanced_blobs_match_requested_ratio() {
        let spec = DatasetSpec::blobs(10100, 2, 100.0, 7);
        let full = generate_full(&spec).unwrap();
        let counts = count_classes(&full.labels, 2);
        assert_eq!(counts[1], 100);
        assert_eq!(counts[0], 10000);
    }

    #[test]
    fn infeasible_ratio_is_an_error() {
        let spec = DatasetSpec::blobs(50, 2, 100.0, 7);
        assert!(generate_full(&spec).is_err());
    }

    #[test]
    fn zero_noise_regression_labels_equal_ground_truth() {
        let spec = DatasetSpec::noisy_regression(200, 2, 0.0, 3);
        let full = generate_full(&spec).unwrap();
        let Labels::Real(labels) = &full.labels else {
            panic!("expected real labels")
        };
        let clean = full.clean_targets.as_ref().unwrap();
        for (a, b) in labels.iter().zip(clean.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn label_noise_std_converges_to_sigma() {
        // Law of large numbers at n >= 1e5: empirical noise std over
        // non-outlier labels within 3% of the configured sigma.
        let sigma = 0.5;
        let mut spec = DatasetSpec::noisy_regression(100_000, 1, sigma, 11);
        spec.outlier_fraction = 0.05;
        spec.outlier_magnitude = 10.0;
        let full = generate_full(&spec).unwrap();
        let Labels::Real(labels) = &full.labels else {
            panic!()
        };
        let clean = full.clean_targets.as_ref().unwrap();
        let mask = full.outlier_mask.as_ref().unwrap();
        let residuals: Vec<f64> = labels
            .iter()
            .zip(clean.iter())
            .zip(mask)
            .filter(|(_, &outlier)| !outlier)
            .map(|((&y, &g), _)| y - g)
            .collect();
        assert!(residuals.len() > 90_000);
        let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
        let var = residuals
            .iter()
            .map(|r| (r - mean) * (r - mean))
            .sum::<f64>()
            / residuals.len() as f64;
        let std = var.sqrt();
        assert!(
            (std - sigma).abs() / sigma < 0.03,
            "empirical std {std} vs sigma {sigma}"
        );
    }

    #[test]
    fn outlier_fraction_is_respected() {
        let mut spec = DatasetSpec::noisy_regression(50_000, 1, 0.1, 5);
        spec.outlier_fraction = 0.05;
        spec.outlier_magnitude = 8.0;
        let full = generate_full(&spec).unwrap();
        let mask = full.outlier_mask.as_ref().unwrap();
        let frac = mask.iter().filter(|&&b| b).count() as f64 / mask.len() as f64;
        assert!((frac - 0.05).abs() < 0.005, "outlier fraction {frac}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DatasetSpec::blobs(500, 3, 10.0, 99);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.validation, b.validation);
        assert_eq!(a.test, b.test);
        let mut other = spec.clone();
        other.seed = 100;
        let c = generate(&other).unwrap();
        assert_ne!(a.train.features, c.train.features);
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let spec = DatasetSpec::blobs(997, 2, 5.0, 13);
        let splits = generate(&spec).unwrap();
        let total = splits.train.len() + splits.validation.len() + splits.test.len();
        assert_eq!(total, 997);
        // Feature rows are continuous draws, so row identity is a reliable
        // disjointness witness.
        let mut seen = std::collections::HashSet::new();
        for split in [&splits.train, &splits.validation, &splits.test] {
            for i in 0..split.len() {
                let key: Vec<u64> = split.features.row(i).iter().map(|v| v.to_bits()).collect();
                assert!(seen.insert(key), "row shared between splits");
            }
        }
    }

    #[test]
    fn multilabel_masks_have_expected_density() {
        let spec = DatasetSpec::multilabel(20_000, 4, 9.0, 3);
        let full = generate_full(&spec).unwrap();
        let Labels::Mask { data, .. } = &full.labels else {
            panic!()
        };
        let density = data.iter().filter(|&&b| b).count() as f64 / data.len() as f64;
        // p_active = 1 / (1 + 9) = 0.1
        assert!((density - 0.1).abs() < 0.01, "density {density}");
    }

    #[test]
    fn csv_round_trip_is_identical() {
        for spec in [
            DatasetSpec::blobs(50, 3, 2.0, 1),
            DatasetSpec::multilabel(40, 3, 3.0, 2),
            {
                let mut s = DatasetSpec::noisy_regression(60, 2, 0.3, 4);
                s.outlier_fraction = 0.1;
                s.outlier_magnitude = 5.0;
                s
            },
        ] {
            let full = generate_full(&spec).unwrap();
            let mut buf = Vec::new();
            let schema = write_csv(&full, &mut buf).unwrap();
            let parsed = load_csv_reader(std::io::Cursor::new(&buf), &schema).unwrap();
            assert_eq!(full, parsed, "round trip for {:?}", spec.kind);
        }
    }

    #[test]
    fn csv_schema_strings_round_trip() {
        for text in ["f,f,class", "f,m,m,m", "f,f,t,t,ct,ct,o,o"] {
            let schema = CsvSchema::parse(text).unwrap();
            assert_eq!(schema.to_string(), text);
        }
        assert!(CsvSchema::parse("f,f").is_err()); // no label
        assert!(CsvSchema::parse("class").is_err()); // no feature
        assert!(CsvSchema::parse("f,class,t").is_err()); // two label kinds
        assert!(CsvSchema::parse("f,t,ct,ct").is_err()); // clean mismatch
        assert!(CsvSchema::parse("f,bogus").is_err());
    }

    #[test]
    fn csv_loader_reports_row_and_column() {
        let schema = CsvSchema::parse("f,f,class").unwrap();
        let text = "a,b,class\n0.5,1.25,0\n0.5,oops,1\n";
        let err = load_csv_reader(std::io::Cursor::new(text.as_bytes()), &schema).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3"), "{msg}");
        assert!(msg.contains("column 2"), "{msg}");
    }

    #[test]
    fn csv_loader_rejects_empty_input() {
        let schema = CsvSchema::parse("f,class").unwrap();
        let err = load_csv_reader(std::io::Cursor::new(b"".as_slice()), &schema).unwrap_err();
        assert!(err.to_string().contains("empty file"));
        let err =
            load_csv_reader(std::io::Cursor::new(b"f0,class\n".as_slice()), &schema).unwrap_err();
        assert!(err.to_string().contains("no data rows"));
    }

    #[test]
    fn csv_loader_counts_samples() {
        let schema = CsvSchema::parse("f,f,class").unwrap();
        let text = "f0,f1,class\n0.5,1.25,0\n-1,2,1\n0,0,0\n";
        let parsed = load_csv_reader(std::io::Cursor::new(text.as_bytes()), &schema).unwrap();
        assert_eq!(parsed.len(), 3);
        assert_eq!(parsed.feature_dim(), 2);
        assert_eq!(parsed.labels, Labels::Class(vec![0, 1, 0]));
        let sample = parsed.sample(1);
        assert_eq!(sample.features, vec![-1.0, 2.0]);
        assert_eq!(sample.label, SampleLabel::Class(1));
    }

    #[test]
    fn csv_loader_rejects_wrong_column_count() {
        let schema = CsvSchema::parse("f,f,class").unwrap();
        let text = "f0,f1,class\n0.5,1.25\n";
        let err = load_csv_reader(std::io::Cursor::new(text.as_bytes()), &schema).unwrap_err();
        assert!(err.to_string().contains("row 2"));
    }
}
