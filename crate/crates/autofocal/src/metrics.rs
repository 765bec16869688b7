//! Evaluation metrics and run traces.
//!
//! A [`RunTrace`] is the per-step record of a training run (learning rate,
//! loss components, gamma, progress estimate, task variances, periodic
//! validation metrics). It serializes to a stable CSV layout with floats at
//! 17 significant digits so traces round-trip exactly and identical runs
//! produce byte-identical files. Wall-clock time is kept in memory for
//! inspection but never written, for the same reason.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::focal::CorrectProbability;
use crate::losses::{regression_p_correct, RegressionBatch, TaskVariance, VarianceNormalization};

/// One training step in a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: u64,
    pub lr: f64,
    pub loss_total: f64,
    /// Classification component (0 when the run has none).
    pub loss_cls: f64,
    /// Regression component including the variance regularizer (0 when the
    /// run has none).
    pub loss_reg: f64,
    /// Focus exponent used at this step (0 for losses without focusing).
    pub gamma: f64,
    /// Progress estimate after this step's tracker update (batch-mean
    /// `p_correct` for losses without a tracker, 0 when no probability
    /// model exists).
    pub p_hat: f64,
    /// Task variances, aligned with [`RunTrace::sigma_groups`].
    pub sigma2: Vec<f64>,
    /// Validation metrics, aligned with [`RunTrace::metric_names`]; present
    /// only on evaluation steps.
    pub validation: Option<Vec<f64>>,
    /// Seconds spent on this step. In-memory only: excluded from the CSV so
    /// identical runs emit identical bytes.
    pub wall_clock: f64,
}

/// Time series of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub sigma_groups: Vec<String>,
    pub metric_names: Vec<String>,
    records: Vec<TraceRecord>,
}

impl RunTrace {
    pub fn new(sigma_groups: Vec<String>, metric_names: Vec<String>) -> Self {
        Self {
            sigma_groups,
            metric_names,
            records: Vec::new(),
        }
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn push(&mut self, record: TraceRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::Domain(format!(
                    "trace steps must strictly increase ({} after {})",
                    record.step, last.step
                )));
            }
        }
        if !record.gamma.is_finite() || !record.p_hat.is_finite() {
            return Err(Error::Domain(
                "gamma and p_hat must be finite in a trace".into(),
            ));
        }
        if !(0.0..=1.0).contains(&record.p_hat) {
            return Err(Error::Domain(format!(
                "p_hat {} outside [0, 1]",
                record.p_hat
            )));
        }
        if record.sigma2.len() != self.sigma_groups.len() {
            return Err(Error::Shape(format!(
                "{} sigma2 values for {} groups",
                record.sigma2.len(),
                self.sigma_groups.len()
            )));
        }
        if let Some(v) = &record.validation {
            if v.len() != self.metric_names.len() {
                return Err(Error::Shape(format!(
                    "{} validation values for {} metrics",
                    v.len(),
                    self.metric_names.len()
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    /// `(step, value)` pairs of one validation metric across all
    /// evaluation steps.
    pub fn metric_series(&self, metric: &str) -> Result<Vec<(u64, f64)>> {
        let idx = self
            .metric_names
            .iter()
            .position(|m| m == metric)
            .ok_or_else(|| Error::UnknownMetric(metric.to_string()))?;
        Ok(self
            .records
            .iter()
            .filter_map(|r| r.validation.as_ref().map(|v| (r.step, v[idx])))
            .collect())
    }

    /// Column layout: `step,lr,loss_total,loss_cls,loss_reg,gamma,p_hat`,
    /// one `sigma2.<group>` column per group, then the validation metric
    /// columns (empty cells outside evaluation steps).
    pub fn to_csv(&self, mut w: impl Write) -> Result<()> {
        let mut header = vec![
            "step".to_string(),
            "lr".to_string(),
            "loss_total".to_string(),
            "loss_cls".to_string(),
            "loss_reg".to_string(),
            "gamma".to_string(),
            "p_hat".to_string(),
        ];
        header.extend(self.sigma_groups.iter().map(|g| format!("sigma2.{g}")));
        header.extend(self.metric_names.iter().cloned());
        writeln!(w, "{}", header.join(","))?;
        for r in &self.records {
            let mut fields = vec![
                r.step.to_string(),
                fmt_float(r.lr),
                fmt_float(r.loss_total),
                fmt_float(r.loss_cls),
                fmt_float(r.loss_reg),
                fmt_float(r.gamma),
                fmt_float(r.p_hat),
            ];
            fields.extend(r.sigma2.iter().map(|&v| fmt_float(v)));
            match &r.validation {
                Some(vals) => fields.extend(vals.iter().map(|&v| fmt_float(v))),
                None => fields.extend(std::iter::repeat_n(String::new(), self.metric_names.len())),
            }
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.to_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("trace CSV is UTF-8")
    }

    pub fn from_csv(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("empty trace: expected a header row".into()))??;
        let columns: Vec<&str> = header.split(',').collect();
        const FIXED: [&str; 7] = [
            "step",
            "lr",
            "loss_total",
            "loss_cls",
            "loss_reg",
            "gamma",
            "p_hat",
        ];
        if columns.len() < FIXED.len() || columns[..FIXED.len()] != FIXED {
            return Err(Error::Data(format!("unexpected trace header '{header}'")));
        }
        let mut sigma_groups = Vec::new();
        let mut metric_names = Vec::new();
        for &col in &columns[FIXED.len()..] {
            if let Some(group) = col.strip_prefix("sigma2.") {
                if !metric_names.is_empty() {
                    return Err(Error::Data(
                        "sigma2 columns must precede metric columns".into(),
                    ));
                }
                sigma_groups.push(group.to_string());
            } else {
                metric_names.push(col.to_string());
            }
        }
        let mut trace = RunTrace::new(sigma_groups, metric_names);
        for (idx, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row_no = idx + 2;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != columns.len() {
                return Err(Error::Data(format!(
                    "trace row {row_no}: {} fields for {} columns",
                    fields.len(),
                    columns.len()
                )));
            }
            let parse = |i: usize| -> Result<f64> {
                fields[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Data(format!("trace row {row_no}, column {}: {e}", i + 1)))
            };
            let n_sigma = trace.sigma_groups.len();
            let sigma2 = (7..7 + n_sigma).map(parse).collect::<Result<Vec<_>>>()?;
            let metric_fields = &fields[7 + n_sigma..];
            let validation = if metric_fields.iter().all(|f| f.is_empty()) {
                None
            } else {
                Some(
                    (7 + n_sigma..fields.len())
                        .map(parse)
                        .collect::<Result<Vec<_>>>()?,
                )
            };
            trace.push(TraceRecord {
                step: fields[0]
                    .parse()
                    .map_err(|e| Error::Data(format!("trace row {row_no}, column 1: {e}")))?,
                lr: parse(1)?,
                loss_total: parse(2)?,
                loss_cls: parse(3)?,
                loss_reg: parse(4)?,
                gamma: parse(5)?,
                p_hat: parse(6)?,
                sigma2,
                validation,
                wall_clock: 0.0,
            })?;
        }
        Ok(trace)
    }
}

/// 17 significant digits: enough to reproduce any f64 exactly.
fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Earliest step at which `metric` reaches `threshold` and stays there for
/// `patience` consecutive evaluations. `None` when that never happens.
pub fn convergence_step(
    trace: &RunTrace,
    metric: &str,
    threshold: f64,
    patience: usize,
) -> Result<Option<u64>> {
    if patience == 0 {
        return Err(Error::Domain("patience must be at least 1".into()));
    }
    let series = trace.metric_series(metric)?;
    let mut run_start: Option<(usize, u64)> = None;
    for (i, &(step, value)) in series.iter().enumerate() {
        if value >= threshold {
            let (start_idx, start_step) = run_start.unwrap_or((i, step));
            run_start = Some((start_idx, start_step));
            if i - start_idx + 1 >= patience {
                return Ok(Some(start_step));
            }
        } else {
            run_start = None;
        }
    }
    Ok(None)
}

/// Classification quality under imbalance.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    /// Unweighted mean F1 over the classes present in the labels.
    pub macro_f1: f64,
    /// Recall of the rarest class present in the labels.
    pub minority_recall: f64,
    /// Classes that were never predicted; their precision is reported as 0.
    pub zero_prediction_classes: Vec<usize>,
}

/// Standard definitions over predicted and true class indices.
pub fn classification_metrics(
    predicted: &[usize],
    labels: &[usize],
    class_count: usize,
) -> Result<ClassificationMetrics> {
    if predicted.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Domain("no samples to evaluate".into()));
    }
    if let Some(&bad) = predicted.iter().chain(labels).find(|&&c| c >= class_count) {
        return Err(Error::Domain(format!(
            "class {bad} outside class count {class_count}"
        )));
    }

    let n = labels.len() as f64;
    let mut true_pos = vec![0usize; class_count];
    let mut pred_count = vec![0usize; class_count];
    let mut label_count = vec![0usize; class_count];
    let mut correct = 0usize;
    for (&p, &y) in predicted.iter().zip(labels) {
        pred_count[p] += 1;
        label_count[y] += 1;
        if p == y {
            true_pos[y] += 1;
            correct += 1;
        }
    }

    let mut precision = vec![0.0; class_count];
    let mut recall = vec![0.0; class_count];
    let mut zero_prediction_classes = Vec::new();
    for c in 0..class_count {
        if pred_count[c] == 0 {
            zero_prediction_classes.push(c);
        } else {
            precision[c] = true_pos[c] as f64 / pred_count[c] as f64;
        }
        if label_count[c] > 0 {
            recall[c] = true_pos[c] as f64 / label_count[c] as f64;
        }
    }

    let present: Vec<usize> = (0..class_count).filter(|&c| label_count[c] > 0).collect();
    let macro_f1 = present
        .iter()
        .map(|&c| {
            let (p, r) = (precision[c], recall[c]);
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .sum::<f64>()
        / present.len() as f64;

    let minority = present
        .iter()
        .copied()
        .min_by_key(|&c| (label_count[c], c))
        .expect("at least one class is present");

    Ok(ClassificationMetrics {
        accuracy: correct as f64 / n,
        per_class_precision: precision,
        minority_recall: recall[minority],
        per_class_recall: recall,
        macro_f1,
        zero_prediction_classes,
    })
}

/// Mean error-model probability per target group: the range-independent
/// regression progress metric. Values near 1 mean predictions beat the
/// assumed label noise, near 0 mean they are far outside it.
pub fn regression_progress_metric(
    batch: &RegressionBatch,
    variances: &[TaskVariance],
    normalization: VarianceNormalization,
) -> Result<Vec<(String, CorrectProbability)>> {
    if variances.len() != batch.groups().len() {
        return Err(Error::Shape(format!(
            "{} variances for {} target groups",
            variances.len(),
            batch.groups().len()
        )));
    }
    let mut out = Vec::with_capacity(batch.groups().len());
    for (g, group) in batch.groups().iter().enumerate() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..batch.len() {
            for &j in &group.dims {
                let delta = batch.predictions().get(i, j) - batch.labels().get(i, j);
                sum += regression_p_correct(delta, variances[g], normalization);
                count += 1;
            }
        }
        out.push((
            group.name.clone(),
            CorrectProbability::clamped(sum / count as f64),
        ));
    }
    Ok(out)
}
