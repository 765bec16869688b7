//! Trainable loss functions.
//!
//! Focused cross entropy for single- and multi-target classification, focal
//! regression with a learned task variance, and the comparison baselines
//! (plain cross entropy, per-batch alpha balancing, plain L1/L2, learned
//! loss-scale weighting).
//!
//! Two conventions hold everywhere:
//!
//! * The focal weight `w` is a constant of the step. Gradients are exactly
//!   `w` times the gradient of the unweighted base loss; nothing flows
//!   through `w`, gamma or the progress estimate.
//! * Losses are mean-reduced over the contributing elements (samples for
//!   single-target, sample-class elements for multi-target, sample-target
//!   elements for regression), so magnitudes are batch-size invariant.

use crate::error::{Error, Result};
use crate::focal::{
    focal_weight, CorrectProbability, GammaSchedule, ProgressBatch, ProgressTracker,
};
use crate::mat::Matrix;
use crate::normal::two_sided_tail;

/// Probabilities are clamped below to this before any logarithm; the
/// cross entropy is unbounded at zero.
pub const PROB_EPSILON: f64 = 1e-7;

/// Labels for a classification batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClassLabels {
    /// One class index per sample.
    Single(Vec<usize>),
    /// Binary activity mask, flat row-major `[samples x classes]`.
    Multi(Vec<bool>),
}

/// Validated batch of class probabilities plus labels.
///
/// Single-target rows must sum to 1 within 1e-6 (softmax output);
/// multi-target entries are independent per-class probabilities (sigmoid
/// output).
#[derive(Debug, Clone)]
pub struct ClassificationBatch {
    probs: Matrix,
    labels: ClassLabels,
}

impl ClassificationBatch {
    pub fn single_target(probs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != probs.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                labels.len(),
                probs.rows()
            )));
        }
        Self::check_probs(&probs)?;
        for i in 0..probs.rows() {
            let sum: f64 = probs.row(i).iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Domain(format!(
                    "row {i} sums to {sum}, expected 1 within 1e-6"
                )));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= probs.cols()) {
            return Err(Error::Domain(format!(
                "label {bad} outside class count {}",
                probs.cols()
            )));
        }
        Ok(Self {
            probs,
            labels: ClassLabels::Single(labels),
        })
    }

    pub fn multi_target(probs: Matrix, active: Vec<bool>) -> Result<Self> {
        if active.len() != probs.rows() * probs.cols() {
            return Err(Error::Shape(format!(
                "mask of {} entries for a {}x{} batch",
                active.len(),
                probs.rows(),
                probs.cols()
            )));
        }
        Self::check_probs(&probs)?;
        Ok(Self {
            probs,
            labels: ClassLabels::Multi(active),
        })
    }

    fn check_probs(probs: &Matrix) -> Result<()> {
        if probs.rows() == 0 || probs.cols() == 0 {
            return Err(Error::Shape("empty probability matrix".into()));
        }
        if let Some(&bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Domain(format!("probability {bad} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.rows() == 0
    }

    pub fn class_count(&self) -> usize {
        self.probs.cols()
    }

    pub fn probabilities(&self) -> &Matrix {
        &self.probs
    }

    pub fn labels(&self) -> &ClassLabels {
        &self.labels
    }

    /// Number of loss-contributing elements.
    pub fn element_count(&self) -> usize {
        match self.labels {
            ClassLabels::Single(_) => self.len(),
            ClassLabels::Multi(_) => self.len() * self.class_count(),
        }
    }

    /// Calls `f(row, col, pc, active)` once per contributing element, in
    /// row-major order.
    pub fn for_each_element(&self, mut f: impl FnMut(usize, usize, f64, bool)) {
        match &self.labels {
            ClassLabels::Single(labels) => {
                for (i, &y) in labels.iter().enumerate() {
                    f(i, y, self.probs.get(i, y), true);
                }
            }
            ClassLabels::Multi(active) => {
                let classes = self.class_count();
                for i in 0..self.len() {
                    for j in 0..classes {
                        let p = self.probs.get(i, j);
                        let a = active[i * classes + j];
                        let pc = if a { p } else { 1.0 - p };
                        f(i, j, pc, a);
                    }
                }
            }
        }
    }

    fn progress_batch<'a>(&'a self, pc_buf: &'a mut Vec<CorrectProbability>) -> ProgressBatch<'a> {
        match &self.labels {
            ClassLabels::Single(_) => {
                pc_buf.clear();
                self.for_each_element(|_, _, pc, _| {
                    pc_buf.push(CorrectProbability::clamped(pc));
                });
                ProgressBatch::Single { p_correct: pc_buf }
            }
            ClassLabels::Multi(active) => ProgressBatch::Multi {
                probs: self.probs.as_slice(),
                active,
                classes: self.class_count(),
            },
        }
    }
}

/// Target group of a regression batch: a named set of output dimensions
/// sharing one task variance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetGroup {
    pub name: String,
    pub dims: Vec<usize>,
}

/// Validated regression batch. Predictions and labels share a shape, and
/// the target groups partition the output dimensions.
#[derive(Debug, Clone)]
pub struct RegressionBatch {
    predictions: Matrix,
    labels: Matrix,
    groups: Vec<TargetGroup>,
    group_of_dim: Vec<usize>,
}

impl RegressionBatch {
    pub fn new(predictions: Matrix, labels: Matrix, groups: Vec<TargetGroup>) -> Result<Self> {
        if predictions.rows() != labels.rows() || predictions.cols() != labels.cols() {
            return Err(Error::Shape(format!(
                "predictions {}x{} vs labels {}x{}",
                predictions.rows(),
                predictions.cols(),
                labels.rows(),
                labels.cols()
            )));
        }
        if predictions.rows() == 0 || predictions.cols() == 0 {
            return Err(Error::Shape("empty regression batch".into()));
        }
        let targets = predictions.cols();
        let mut group_of_dim = vec![usize::MAX; targets];
        for (g, group) in groups.iter().enumerate() {
            if group.dims.is_empty() {
                return Err(Error::Domain(format!(
                    "target group '{}' is empty",
                    group.name
                )));
            }
            for &d in &group.dims {
                if d >= targets {
                    return Err(Error::Domain(format!(
                        "target group '{}' references dimension {d} of {targets}",
                        group.name
                    )));
                }
                if group_of_dim[d] != usize::MAX {
                    return Err(Error::Domain(format!(
                        "target dimension {d} belongs to more than one group"
                    )));
                }
                group_of_dim[d] = g;
            }
        }
        if let Some(d) = group_of_dim.iter().position(|&g| g == usize::MAX) {
            return Err(Error::Domain(format!(
                "target dimension {d} belongs to no group"
            )));
        }
        Ok(Self {
            predictions,
            labels,
            groups,
            group_of_dim,
        })
    }

    /// All output dimensions in one group.
    pub fn single_group(predictions: Matrix, labels: Matrix, name: &str) -> Result<Self> {
        let dims = (0..predictions.cols()).collect();
        Self::new(
            predictions,
            labels,
            vec![TargetGroup {
                name: name.to_string(),
                dims,
            }],
        )
    }

    pub fn len(&self) -> usize {
        self.predictions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.rows() == 0
    }

    pub fn target_count(&self) -> usize {
        self.predictions.cols()
    }

    pub fn predictions(&self) -> &Matrix {
        &self.predictions
    }

    pub fn labels(&self) -> &Matrix {
        &self.labels
    }

    pub fn groups(&self) -> &[TargetGroup] {
        &self.groups
    }

    pub fn group_of_dim(&self, dim: usize) -> usize {
        self.group_of_dim[dim]
    }
}

/// Learnable positive task variance, parametrized as `sigma^2 = exp(s)` so
/// positivity holds for any finite `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskVariance {
    s: f64,
}

impl TaskVariance {
    pub fn from_log(s: f64) -> Result<Self> {
        if !s.is_finite() || !s.exp().is_finite() || s.exp() <= 0.0 {
            return Err(Error::Domain(format!(
                "log-variance {s} does not give a positive finite sigma^2"
            )));
        }
        Ok(Self { s })
    }

    pub fn from_sigma2(sigma2: f64) -> Result<Self> {
        if !sigma2.is_finite() || sigma2 <= 0.0 {
            return Err(Error::Domain(format!(
                "sigma^2 must be finite and positive, got {sigma2}"
            )));
        }
        Ok(Self { s: sigma2.ln() })
    }

    /// The unconstrained learnable parameter.
    pub fn log_value(self) -> f64 {
        self.s
    }

    pub fn sigma2(self) -> f64 {
        self.s.exp()
    }

    /// Regularizer contribution `ln(sigma^2 + 1) >= 0`.
    pub fn regularizer(self) -> f64 {
        self.sigma2().ln_1p()
    }

    /// `d/ds ln(exp(s) + 1) = sigma^2 / (sigma^2 + 1)`.
    pub fn regularizer_grad(self) -> f64 {
        let v = self.sigma2();
        v / (v + 1.0)
    }
}

/// Base loss for regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseLoss {
    L1,
    L2,
}

/// Denominator of the error-to-probability normalization. `Squared` is the
/// as-written form `|dx| / sigma^2`; `Std` is the conventional
/// `|dx| / sigma` for sensitivity studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceNormalization {
    #[default]
    Squared,
    Std,
}

impl VarianceNormalization {
    fn denominator(self, sigma2: f64) -> f64 {
        match self {
            VarianceNormalization::Squared => sigma2,
            VarianceNormalization::Std => sigma2.sqrt(),
        }
    }
}

/// Per-batch diagnostics carried by every loss output.
#[derive(Debug, Clone, Default)]
pub struct LossDiagnostics {
    /// Mean raw `p_correct` over the contributing elements, when the loss
    /// has a probability model.
    pub batch_mean_p_correct: Option<f64>,
    /// Focus exponent used for this batch (0 for plain cross entropy).
    pub gamma: Option<f64>,
    pub warnings: Vec<String>,
}

/// Scalar loss plus everything the trainer needs from one batch.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    /// One weight per contributing element, row-major, in `[0, 1]`.
    pub per_sample_weight: Vec<f64>,
    /// Gradient with respect to the model outputs the batch was built from.
    pub grad_wrt_outputs: Matrix,
    /// Gradient with respect to each task-variance log parameter.
    pub grad_wrt_variance: Vec<f64>,
    pub diagnostics: LossDiagnostics,
}

#[inline]
fn clamp_prob(pc: f64) -> f64 {
    pc.max(PROB_EPSILON)
}

/// Gradient of the mean-reduced cross entropy with respect to the model
/// probability behind one element. `scale` is the element count.
#[inline]
fn base_ce_grad(pc_safe: f64, active: bool, scale: f64) -> f64 {
    let g = -1.0 / (pc_safe * scale);
    if active {
        g
    } else {
        -g
    }
}

/// Plain cross entropy `-ln(p_correct)`, mean-reduced. All weights are 1.
pub fn cross_entropy(batch: &ClassificationBatch) -> LossOutput {
    let scale = batch.element_count() as f64;
    let mut weights = Vec::with_capacity(batch.element_count());
    let mut grads = Matrix::zeros(batch.len(), batch.class_count());
    let mut total = 0.0;
    let mut pc_sum = 0.0;
    batch.for_each_element(|i, j, pc, active| {
        let pc_safe = clamp_prob(pc);
        total += -pc_safe.ln();
        grads.set(i, j, base_ce_grad(pc_safe, active, scale));
        weights.push(1.0);
        pc_sum += pc;
    });
    LossOutput {
        total: total / scale,
        per_sample_weight: weights,
        grad_wrt_outputs: grads,
        grad_wrt_variance: Vec::new(),
        diagnostics: LossDiagnostics {
            batch_mean_p_correct: Some(pc_sum / scale),
            gamma: Some(0.0),
            warnings: Vec::new(),
        },
    }
}

/// Focused cross entropy: per-element weight `w = (1 - p_correct)^gamma` on
/// top of [`cross_entropy`], with gamma taken from the schedule at the
/// tracker's pre-update estimate. The first batch bootstraps the estimate
/// from its own policy mean; the tracker is updated after the weights are
/// computed, so gamma never depends on the batch it weights.
pub fn focal_classification(
    batch: &ClassificationBatch,
    schedule: &GammaSchedule,
    tracker: &mut ProgressTracker,
) -> LossOutput {
    let mut warnings = Vec::new();
    let mut pc_buf = Vec::new();
    let progress = batch.progress_batch(&mut pc_buf);
    let batch_mean = tracker
        .batch_mean(&progress)
        .expect("validated batch cannot fail the progress reduction");

    let p_hat = tracker.smoothed().or(batch_mean);
    let gamma = match p_hat {
        Some(p) => schedule.gamma(p),
        None => {
            warnings.push("no progress estimate for this batch; focusing disabled".to_string());
            0.0
        }
    };

    let scale = batch.element_count() as f64;
    let mut weights = Vec::with_capacity(batch.element_count());
    let mut grads = Matrix::zeros(batch.len(), batch.class_count());
    let mut total = 0.0;
    let mut pc_sum = 0.0;
    batch.for_each_element(|i, j, pc, active| {
        let w = focal_weight(CorrectProbability::clamped(pc), gamma);
        let pc_safe = clamp_prob(pc);
        total += w * -pc_safe.ln();
        grads.set(i, j, w * base_ce_grad(pc_safe, active, scale));
        weights.push(w);
        pc_sum += pc;
    });

    if tracker
        .update(&progress)
        .expect("validated batch cannot fail the progress reduction")
        .is_none()
    {
        warnings.push("batch left the progress tracker unchanged (nothing to average)".into());
    }

    LossOutput {
        total: total / scale,
        per_sample_weight: weights,
        grad_wrt_outputs: grads,
        grad_wrt_variance: Vec::new(),
        diagnostics: LossDiagnostics {
            batch_mean_p_correct: Some(pc_sum / scale),
            gamma: Some(gamma),
            warnings,
        },
    }
}

/// Per-batch alpha balancing: each sample's cross entropy is scaled by
/// `1 - (relative frequency of its class within the batch)`. Single-target
/// only.
pub fn alpha_balanced_classification(batch: &ClassificationBatch) -> Result<LossOutput> {
    let labels = match batch.labels() {
        ClassLabels::Single(labels) => labels,
        ClassLabels::Multi(_) => {
            return Err(Error::Domain(
                "alpha balancing is defined for single-target batches only".into(),
            ))
        }
    };
    let n = batch.len() as f64;
    let mut counts = vec![0usize; batch.class_count()];
    for &y in labels {
        counts[y] += 1;
    }
    let alpha: Vec<f64> = counts.iter().map(|&c| 1.0 - c as f64 / n).collect();

    let mut warnings = Vec::new();
    if counts.iter().filter(|&&c| c > 0).count() == 1 {
        warnings.push(
            "batch contains a single class; every alpha weight is zero and the loss vanishes"
                .into(),
        );
    }

    let scale = batch.element_count() as f64;
    let mut weights = Vec::with_capacity(batch.element_count());
    let mut grads = Matrix::zeros(batch.len(), batch.class_count());
    let mut total = 0.0;
    let mut pc_sum = 0.0;
    batch.for_each_element(|i, j, pc, active| {
        let a = alpha[labels[i]];
        let pc_safe = clamp_prob(pc);
        total += a * -pc_safe.ln();
        grads.set(i, j, a * base_ce_grad(pc_safe, active, scale));
        weights.push(a);
        pc_sum += pc;
    });

    Ok(LossOutput {
        total: total / scale,
        per_sample_weight: weights,
        grad_wrt_outputs: grads,
        grad_wrt_variance: Vec::new(),
        diagnostics: LossDiagnostics {
            batch_mean_p_correct: Some(pc_sum / scale),
            gamma: None,
            warnings,
        },
    })
}

/// Mean-reduced base-loss element and its gradient. `scale` is the element
/// count. The L1 subgradient at zero is zero.
#[inline]
fn base_reg_elem(delta: f64, base: BaseLoss, scale: f64) -> (f64, f64) {
    match base {
        BaseLoss::L2 => (delta * delta, 2.0 * delta / scale),
        BaseLoss::L1 => {
            let g = if delta == 0.0 {
                0.0
            } else if delta > 0.0 {
                1.0
            } else {
                -1.0
            };
            (delta.abs(), g / scale)
        }
    }
}

/// Probability that a prediction error `delta` beats the assumed Gaussian
/// label noise: `1 - (Phi(z) - Phi(-z))` with `z = |delta| / denom`.
#[inline]
pub fn regression_p_correct(
    delta: f64,
    variance: TaskVariance,
    normalization: VarianceNormalization,
) -> f64 {
    two_sided_tail(delta.abs() / normalization.denominator(variance.sigma2()))
}

/// Focal regression: the base loss weighted by `(1 - p_correct)^gamma`
/// where `p_correct` comes from the Gaussian error model, plus the
/// `ln(sigma^2 + 1)` regularizer per target group.
///
/// The weight is fully detached: the variance parameters train through the
/// regularizer gradient only, and the data term's gradient is exactly the
/// weighted base-loss gradient.
pub fn focal_regression(
    batch: &RegressionBatch,
    variances: &[TaskVariance],
    schedule: &GammaSchedule,
    tracker: &mut ProgressTracker,
    base: BaseLoss,
    normalization: VarianceNormalization,
) -> Result<LossOutput> {
    check_variances(batch, variances)?;
    let n = batch.len();
    let targets = batch.target_count();
    let scale = (n * targets) as f64;

    // First pass: probabilities from the error model.
    let mut pcs = Vec::with_capacity(n * targets);
    for i in 0..n {
        for j in 0..targets {
            let delta = batch.predictions().get(i, j) - batch.labels().get(i, j);
            if !delta.is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite prediction error at sample {i}, target {j}"
                )));
            }
            let variance = variances[batch.group_of_dim(j)];
            pcs.push(CorrectProbability::clamped(regression_p_correct(
                delta,
                variance,
                normalization,
            )));
        }
    }

    let mut warnings = Vec::new();
    let progress = ProgressBatch::Single { p_correct: &pcs };
    let batch_mean = tracker.batch_mean(&progress)?;
    let p_hat = tracker.smoothed().or(batch_mean);
    let gamma = match p_hat {
        Some(p) => schedule.gamma(p),
        None => {
            warnings.push("no progress estimate for this batch; focusing disabled".to_string());
            0.0
        }
    };

    let mut weights = Vec::with_capacity(n * targets);
    let mut grads = Matrix::zeros(n, targets);
    let mut data_total = 0.0;
    let mut pc_sum = 0.0;
    for i in 0..n {
        for j in 0..targets {
            let pc = pcs[i * targets + j];
            let w = focal_weight(pc, gamma);
            let delta = batch.predictions().get(i, j) - batch.labels().get(i, j);
            let (l, g) = base_reg_elem(delta, base, scale);
            data_total += w * l;
            grads.set(i, j, w * g);
            weights.push(w);
            pc_sum += pc.value();
        }
    }

    let mut total = data_total / scale;
    let mut grad_wrt_variance = Vec::with_capacity(variances.len());
    for variance in variances {
        total += variance.regularizer();
        grad_wrt_variance.push(variance.regularizer_grad());
    }

    tracker.update(&progress)?;

    Ok(LossOutput {
        total,
        per_sample_weight: weights,
        grad_wrt_outputs: grads,
        grad_wrt_variance,
        diagnostics: LossDiagnostics {
            batch_mean_p_correct: Some(pc_sum / scale),
            gamma: Some(gamma),
            warnings,
        },
    })
}

/// Plain mean-reduced L1/L2 regression. No probability model, no variance.
pub fn plain_regression(batch: &RegressionBatch, base: BaseLoss) -> Result<LossOutput> {
    let n = batch.len();
    let targets = batch.target_count();
    let scale = (n * targets) as f64;
    let mut grads = Matrix::zeros(n, targets);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..targets {
            let delta = batch.predictions().get(i, j) - batch.labels().get(i, j);
            if !delta.is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite prediction error at sample {i}, target {j}"
                )));
            }
            let (l, g) = base_reg_elem(delta, base, scale);
            total += l;
            grads.set(i, j, g);
        }
    }
    Ok(LossOutput {
        total: total / scale,
        per_sample_weight: vec![1.0; n * targets],
        grad_wrt_outputs: grads,
        grad_wrt_variance: Vec::new(),
        diagnostics: LossDiagnostics::default(),
    })
}

/// Learned loss-scale baseline for regression: each target group
/// contributes `mean(L) / (2 sigma^2) + ln(sigma^2 + 1)`. Unlike the focal
/// losses, the variance gradient here carries the data term.
pub fn multiloss_regression(
    batch: &RegressionBatch,
    variances: &[TaskVariance],
    base: BaseLoss,
    normalization: VarianceNormalization,
) -> Result<LossOutput> {
    check_variances(batch, variances)?;
    let n = batch.len();
    let targets = batch.target_count();

    let mut group_totals = vec![0.0; variances.len()];
    let mut group_elems = vec![0usize; variances.len()];
    for group in batch.groups() {
        let g = batch.group_of_dim(group.dims[0]);
        group_elems[g] = n * group.dims.len();
    }
    let mut grads = Matrix::zeros(n, targets);
    let mut pc_sum = 0.0;
    for i in 0..n {
        for j in 0..targets {
            let delta = batch.predictions().get(i, j) - batch.labels().get(i, j);
            if !delta.is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite prediction error at sample {i}, target {j}"
                )));
            }
            let g = batch.group_of_dim(j);
            let (l, grad) = base_reg_elem(delta, base, group_elems[g] as f64);
            group_totals[g] += l;
            grads.set(i, j, grad / (2.0 * variances[g].sigma2()));
            pc_sum += regression_p_correct(delta, variances[g], normalization);
        }
    }

    let mut total = 0.0;
    let mut grad_wrt_variance = Vec::with_capacity(variances.len());
    for (g, variance) in variances.iter().enumerate() {
        let mean_loss = group_totals[g] / group_elems[g] as f64;
        let sigma2 = variance.sigma2();
        total += mean_loss / (2.0 * sigma2) + variance.regularizer();
        // d/ds [L / (2 e^s)] = -L / (2 sigma^2)
        grad_wrt_variance.push(-mean_loss / (2.0 * sigma2) + variance.regularizer_grad());
    }

    Ok(LossOutput {
        total,
        per_sample_weight: vec![1.0; n * targets],
        grad_wrt_outputs: grads,
        grad_wrt_variance,
        diagnostics: LossDiagnostics {
            batch_mean_p_correct: Some(pc_sum / (n * targets) as f64),
            gamma: None,
            warnings: Vec::new(),
        },
    })
}

/// Uncertainty-weighted combination of task losses:
/// `sum_i [ L_i / (2 sigma_i^2) + ln(sigma_i^2 + 1) ]`.
pub fn multiloss_combine(task_losses: &[(f64, TaskVariance)]) -> f64 {
    task_losses
        .iter()
        .map(|&(loss, variance)| loss / (2.0 * variance.sigma2()) + variance.regularizer())
        .sum()
}

/// Fixed-weight combination `sum_i w_i * L_i`. Empty input sums to zero.
pub fn weighted_sum_loss(losses: &[(f64, f64)]) -> f64 {
    losses.iter().map(|&(loss, weight)| weight * loss).sum()
}

fn check_variances(batch: &RegressionBatch, variances: &[TaskVariance]) -> Result<()> {
    if variances.len() != batch.groups().len() {
        return Err(Error::Shape(format!(
            "{} variances for {} target groups",
            variances.len(),
            batch.groups().len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::focal::{GammaSchedule, ProgressPolicy, ProgressTracker};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn tracker() -> ProgressTracker {
        ProgressTracker::new(ProgressPolicy::SingleTarget)
    }

    fn single_batch(rows: &[(Vec<f64>, usize)]) -> ClassificationBatch {
        let probs = Matrix::from_rows(&rows.iter().map(|(p, _)| p.clone()).collect::<Vec<_>>());
        let labels = rows.iter().map(|&(_, y)| y).collect();
        ClassificationBatch::single_target(probs, labels).unwrap()
    }

    fn random_single_batch(rng: &mut StdRng, n: usize, classes: usize) -> ClassificationBatch {
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|r| r / sum).collect();
            rows.push((probs, rng.gen_range(0..classes)));
        }
        single_batch(&rows)
    }

    fn random_multi_batch(rng: &mut StdRng, n: usize, classes: usize) -> ClassificationBatch {
        let mut probs = Matrix::zeros(n, classes);
        let mut active = Vec::with_capacity(n * classes);
        for i in 0..n {
            for j in 0..classes {
                probs.set(i, j, rng.gen_range(0.02..0.98));
                active.push(rng.gen_bool(0.3));
            }
        }
        ClassificationBatch::multi_target(probs, active).unwrap()
    }

    /// Simpson quadrature of the standard normal density on [0, z]; the
    /// independent route to the two-sided tail mass.
    fn normal_tail_oracle(z: f64) -> f64 {
        let n = 4000;
        let h = z / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(0.0) + pdf(z);
        for i in 1..n {
            let t = i as f64 * h;
            acc += if i % 2 == 1 {
                4.0 * pdf(t)
            } else {
                2.0 * pdf(t)
            };
        }
        1.0 - 2.0 * (acc * h / 3.0)
    }

    #[test]
    fn batch_validation() {
        // Rows must sum to 1.
        let bad =
            ClassificationBatch::single_target(Matrix::from_vec(1, 2, vec![0.6, 0.5]), vec![0]);
        assert!(bad.is_err());
        // Labels within class count.
        let bad =
            ClassificationBatch::single_target(Matrix::from_vec(1, 2, vec![0.5, 0.5]), vec![2]);
        assert!(bad.is_err());
        // Probabilities within [0, 1].
        let bad = ClassificationBatch::multi_target(
            Matrix::from_vec(1, 2, vec![1.2, 0.5]),
            vec![true, false],
        );
        assert!(bad.is_err());
        // Mask length must match.
        let bad =
            ClassificationBatch::multi_target(Matrix::from_vec(1, 2, vec![0.5, 0.5]), vec![true]);
        assert!(bad.is_err());
    }

    #[test]
    fn cross_entropy_values() {
        // p_correct = 1 -> exactly zero loss.
        let out = cross_entropy(&single_batch(&[(vec![1.0, 0.0], 0)]));
        assert_eq!(out.total, 0.0);

        // p_correct = e^-1 -> loss 1.
        let e_inv = (-1.0f64).exp();
        let out = cross_entropy(&single_batch(&[(vec![e_inv, 1.0 - e_inv], 0)]));
        assert!((out.total - 1.0).abs() < 1e-12);

        // Mean of {ln 2, ln 4}.
        let out = cross_entropy(&single_batch(&[(vec![0.5, 0.5], 0), (vec![0.25, 0.75], 0)]));
        assert!((out.total - 1.0397207708399179).abs() < 1e-12);
        assert!(out.per_sample_weight.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let out = cross_entropy(&single_batch(&[(vec![0.0, 1.0], 0)]));
        assert!((out.total - -PROB_EPSILON.ln()).abs() < 1e-9);
        assert!(out.total.is_finite());
    }

    #[test]
    fn focal_classification_values() {
        // All samples perfect: zero loss regardless of gamma.
        let schedule = GammaSchedule::fixed(2.0).unwrap();
        let mut t = tracker();
        let out = focal_classification(
            &single_batch(&[(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 1)]),
            &schedule,
            &mut t,
        );
        assert_eq!(out.total, 0.0);

        // Single sample pc = 0.5, gamma = 2: 0.25 * ln 2.
        let mut t = tracker();
        let out = focal_classification(&single_batch(&[(vec![0.5, 0.5], 0)]), &schedule, &mut t);
        assert!((out.total - 0.17328679513998632).abs() < 1e-12);
        assert_eq!(out.per_sample_weight, vec![0.25]);
        // Tracker was updated with the batch mean afterwards.
        assert_eq!(t.smoothed().unwrap().value(), 0.5);
    }

    #[test]
    fn focal_gamma_zero_is_bitwise_cross_entropy() {
        let mut rng = StdRng::seed_from_u64(7);
        let schedule = GammaSchedule::fixed(0.0).unwrap();
        for _ in 0..20 {
            let batch = random_single_batch(&mut rng, 9, 4);
            let mut t = tracker();
            let focal = focal_classification(&batch, &schedule, &mut t);
            let ce = cross_entropy(&batch);
            assert_eq!(focal.total.to_bits(), ce.total.to_bits());
            for (a, b) in focal
                .grad_wrt_outputs
                .iter()
                .zip(ce.grad_wrt_outputs.iter())
            {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn detached_weight_identity_single_and_multi() {
        // grad(focal) must equal w * grad(plain CE) bit for bit.
        let mut rng = StdRng::seed_from_u64(11);
        let schedule = GammaSchedule::shannon_info();
        for round in 0..40 {
            let (batch, classes) = if round % 2 == 0 {
                (random_single_batch(&mut rng, 8, 3), 3)
            } else {
                (random_multi_batch(&mut rng, 6, 4), 4)
            };
            let mut t = tracker();
            let focal = focal_classification(&batch, &schedule, &mut t);
            let ce = cross_entropy(&batch);
            let mut k = 0usize;
            batch.for_each_element(|i, j, _, _| {
                let expect = focal.per_sample_weight[k] * ce.grad_wrt_outputs.get(i, j);
                let got = focal.grad_wrt_outputs.get(i, j);
                assert_eq!(
                    got.to_bits(),
                    expect.to_bits(),
                    "element ({i},{j}) of a {classes}-class batch"
                );
                k += 1;
            });
        }
    }

    #[test]
    fn focal_first_batch_bootstraps_gamma_from_batch_mean() {
        let schedule = GammaSchedule::shannon_info();
        let mut t = tracker();
        let batch = single_batch(&[(vec![0.5, 0.5], 0)]);
        let out = focal_classification(&batch, &schedule, &mut t);
        // p_hat = 0.5 -> gamma = ln 2.
        assert!((out.diagnostics.gamma.unwrap() - 2.0f64.ln()).abs() < 1e-12);

        // Second batch uses the pre-update estimate (0.5), not its own mean.
        let easy = single_batch(&[(vec![0.9, 0.1], 0)]);
        let out2 = focal_classification(&easy, &schedule, &mut t);
        assert!((out2.diagnostics.gamma.unwrap() - 2.0f64.ln()).abs() < 1e-12);
        // 0.95 * 0.5 + 0.05 * 0.9
        assert!((t.smoothed().unwrap().value() - 0.52).abs() < 1e-12);
    }

    #[test]
    fn alpha_balanced_values() {
        // 90/10 split: alpha_A = 0.1, alpha_B = 0.9.
        let mut rows = vec![(vec![0.8, 0.2], 0usize); 9];
        rows.push((vec![0.8, 0.2], 1));
        let out = alpha_balanced_classification(&single_batch(&rows)).unwrap();
        assert!((out.per_sample_weight[0] - 0.1).abs() < 1e-12);
        assert!((out.per_sample_weight[9] - 0.9).abs() < 1e-12);

        // 50/50: total = 0.5 * mean CE.
        let rows = vec![(vec![0.7, 0.3], 0usize), (vec![0.4, 0.6], 1)];
        let batch = single_batch(&rows);
        let out = alpha_balanced_classification(&batch).unwrap();
        let ce = cross_entropy(&batch);
        assert!((out.total - 0.5 * ce.total).abs() < 1e-12);

        // Single-class batch: zero loss plus a warning.
        let rows = vec![(vec![0.7, 0.3], 0usize); 4];
        let out = alpha_balanced_classification(&single_batch(&rows)).unwrap();
        assert_eq!(out.total, 0.0);
        assert!(!out.diagnostics.warnings.is_empty());

        // Multi-target input is rejected.
        let multi = ClassificationBatch::multi_target(
            Matrix::from_vec(1, 2, vec![0.5, 0.5]),
            vec![true, false],
        )
        .unwrap();
        assert!(alpha_balanced_classification(&multi).is_err());
    }

    #[test]
    fn regression_probability_values() {
        let v = TaskVariance::from_sigma2(1.0).unwrap();
        // Perfect prediction.
        assert_eq!(
            regression_p_correct(0.0, v, VarianceNormalization::Squared),
            1.0
        );
        // |dx|/sigma^2 = 1.96 vs the quadrature oracle.
        let got = regression_p_correct(1.96, v, VarianceNormalization::Squared);
        let oracle = normal_tail_oracle(1.96);
        assert!((got - oracle).abs() < 1e-9, "got {got}, oracle {oracle}");
        assert!((got - 0.04999579).abs() < 1e-6);
        // Huge error: p_correct -> 0.
        assert!(regression_p_correct(1e9, v, VarianceNormalization::Squared) < 1e-300);
    }

    #[test]
    fn regression_probability_scale_invariant() {
        // (dx, sigma^2) -> (c dx, c sigma^2) leaves p_correct unchanged.
        let base = regression_p_correct(
            0.7,
            TaskVariance::from_sigma2(0.9).unwrap(),
            VarianceNormalization::Squared,
        );
        for c in [0.001, 1.0, 1000.0] {
            let scaled = regression_p_correct(
                c * 0.7,
                TaskVariance::from_sigma2(c * 0.9).unwrap(),
                VarianceNormalization::Squared,
            );
            assert!((scaled - base).abs() < 1e-12, "c={c}");
        }
    }

    #[test]
    fn regression_probability_monotone_in_error() {
        let v = TaskVariance::from_sigma2(0.5).unwrap();
        let mut last = 1.0;
        for i in 1..200 {
            let dx = i as f64 * 0.05;
            let pc = regression_p_correct(dx, v, VarianceNormalization::Squared);
            assert!(pc < last, "not strictly decreasing at dx={dx}");
            last = pc;
        }
    }

    #[test]
    fn std_normalization_uses_sigma() {
        let v = TaskVariance::from_sigma2(4.0).unwrap();
        let squared = regression_p_correct(1.0, v, VarianceNormalization::Squared);
        let std = regression_p_correct(1.0, v, VarianceNormalization::Std);
        // |dx|/sigma^2 = 0.25, |dx|/sigma = 0.5: smaller z means larger tail.
        assert!(squared > std);
    }

    #[test]
    fn focal_regression_perfect_prediction_keeps_only_regularizer() {
        let preds = Matrix::from_vec(2, 1, vec![1.0, -2.0]);
        let labels = preds.clone();
        let batch = RegressionBatch::single_group(preds, labels, "y").unwrap();
        let v = TaskVariance::from_sigma2(1.0).unwrap();
        let mut t = tracker();
        let out = focal_regression(
            &batch,
            &[v],
            &GammaSchedule::fixed(2.0).unwrap(),
            &mut t,
            BaseLoss::L2,
            VarianceNormalization::Squared,
        )
        .unwrap();
        assert_eq!(out.total, v.regularizer());
        assert!(out.per_sample_weight.iter().all(|&w| w == 0.0));

        // Under the information schedule a perfect first batch drives gamma
        // to 0, so the weights collapse to 1 instead; the total is still the
        // regularizer alone because the base loss vanishes.
        let mut t = tracker();
        let out = focal_regression(
            &batch,
            &[v],
            &GammaSchedule::shannon_info(),
            &mut t,
            BaseLoss::L2,
            VarianceNormalization::Squared,
        )
        .unwrap();
        assert_eq!(out.total, v.regularizer());
    }

    #[test]
    fn focal_regression_gamma_zero_reduces_to_base_plus_regularizer() {
        let mut rng = StdRng::seed_from_u64(3);
        let preds = Matrix::from_vec(4, 2, (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let labels = Matrix::from_vec(4, 2, (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let batch = RegressionBatch::single_group(preds, labels, "y").unwrap();
        let v = TaskVariance::from_sigma2(0.7).unwrap();
        let mut t = tracker();
        let focal = focal_regression(
            &batch,
            &[v],
            &GammaSchedule::fixed(0.0).unwrap(),
            &mut t,
            BaseLoss::L2,
            VarianceNormalization::Squared,
        )
        .unwrap();
        let plain = plain_regression(&batch, BaseLoss::L2).unwrap();
        assert_eq!(
            focal.total.to_bits(),
            (plain.total + v.regularizer()).to_bits()
        );
        for (a, b) in focal
            .grad_wrt_outputs
            .iter()
            .zip(plain.grad_wrt_outputs.iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn focal_regression_non_finite_delta_is_domain_error() {
        let preds = Matrix::from_vec(1, 1, vec![f64::INFINITY]);
        let labels = Matrix::from_vec(1, 1, vec![0.0]);
        let batch = RegressionBatch::single_group(preds, labels, "y").unwrap();
        let mut t = tracker();
        let err = focal_regression(
            &batch,
            &[TaskVariance::from_sigma2(1.0).unwrap()],
            &GammaSchedule::shannon_info(),
            &mut t,
            BaseLoss::L2,
            VarianceNormalization::Squared,
        );
        assert!(err.is_err());
    }

    #[test]
    fn focal_regression_variance_grad_is_regularizer_only() {
        let preds = Matrix::from_vec(2, 1, vec![1.0, 3.0]);
        let labels = Matrix::from_vec(2, 1, vec![0.5, 2.0]);
        let batch = RegressionBatch::single_group(preds, labels, "y").unwrap();
        let v = TaskVariance::from_sigma2(0.8).unwrap();
        let mut t = tracker();
        let out = focal_regression(
            &batch,
            &[v],
            &GammaSchedule::shannon_info(),
            &mut t,
            BaseLoss::L2,
            VarianceNormalization::Squared,
        )
        .unwrap();
        assert_eq!(out.grad_wrt_variance.len(), 1);
        assert_eq!(
            out.grad_wrt_variance[0].to_bits(),
            v.regularizer_grad().to_bits()
        );
    }

    #[test]
    fn multiloss_values() {
        let v1 = TaskVariance::from_sigma2(1.0).unwrap();
        // One task, sigma^2 = 1, L = 2: 1 + ln 2.
        let got = multiloss_combine(&[(2.0, v1)]);
        assert!((got - 1.6931471805599453).abs() < 1e-12);
        // L = 0: regularizer only.
        assert!((multiloss_combine(&[(0.0, v1)]) - 2.0f64.ln()).abs() < 1e-12);
        // Two identical tasks: exactly twice one task.
        let one = multiloss_combine(&[(2.0, v1)]);
        let two = multiloss_combine(&[(2.0, v1), (2.0, v1)]);
        assert_eq!(two.to_bits(), (one + one).to_bits());
    }

    #[test]
    fn multiloss_and_weighted_sum_are_linear_in_the_task_loss() {
        let v = TaskVariance::from_sigma2(0.8).unwrap();
        // Holding sigma^2 fixed, the combine rule is affine in L with slope
        // 1 / (2 sigma^2).
        let slope = (multiloss_combine(&[(3.0, v)]) - multiloss_combine(&[(1.0, v)])) / 2.0;
        let slope2 = (multiloss_combine(&[(10.0, v)]) - multiloss_combine(&[(4.0, v)])) / 6.0;
        assert!((slope - slope2).abs() < 1e-12);
        assert!((slope - 1.0 / (2.0 * v.sigma2())).abs() < 1e-12);
        // Same for the fixed-weight sum, with slope equal to the weight.
        let w = 7.5;
        let slope = (weighted_sum_loss(&[(3.0, w)]) - weighted_sum_loss(&[(1.0, w)])) / 2.0;
        assert!((slope - w).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_values() {
        assert_eq!(weighted_sum_loss(&[(1.0, 1.0), (0.5, 10.0)]), 6.0);
        assert_eq!(weighted_sum_loss(&[(3.25, 1.0)]), 3.25);
        assert_eq!(weighted_sum_loss(&[]), 0.0);
    }

    #[test]
    fn target_groups_must_partition() {
        let preds = Matrix::zeros(2, 3);
        let labels = Matrix::zeros(2, 3);
        // Missing dimension 2.
        let err = RegressionBatch::new(
            preds.clone(),
            labels.clone(),
            vec![TargetGroup {
                name: "a".into(),
                dims: vec![0, 1],
            }],
        );
        assert!(err.is_err());
        // Duplicate dimension.
        let err = RegressionBatch::new(
            preds.clone(),
            labels.clone(),
            vec![
                TargetGroup {
                    name: "a".into(),
                    dims: vec![0, 1],
                },
                TargetGroup {
                    name: "b".into(),
                    dims: vec![1, 2],
                },
            ],
        );
        assert!(err.is_err());
        // Two disjoint groups are fine.
        let ok = RegressionBatch::new(
            preds,
            labels,
            vec![
                TargetGroup {
                    name: "a".into(),
                    dims: vec![0, 2],
                },
                TargetGroup {
                    name: "b".into(),
                    dims: vec![1],
                },
            ],
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn task_variance_is_positive_and_regularized() {
        assert!(TaskVariance::from_sigma2(0.0).is_err());
        assert!(TaskVariance::from_sigma2(-1.0).is_err());
        assert!(TaskVariance::from_log(f64::NAN).is_err());
        let v = TaskVariance::from_log(-40.0).unwrap();
        assert!(v.sigma2() > 0.0);
        assert!(v.regularizer() >= 0.0);
        let v = TaskVariance::from_sigma2(0.35).unwrap();
        assert!((v.sigma2() - 0.35).abs() < 1e-15);
    }

    /// Central finite differences of the frozen-weight loss with respect to
    /// the model outputs and the variance log parameter must match the
    /// analytic gradients. The oracle freezes w and gamma at their
    /// base-point values, mirroring the detached-weight convention.
    #[test]
    fn finite_difference_gradients() {
        let mut rng = StdRng::seed_from_u64(21);
        let step = 1e-5;
        let tol = 1e-5;

        // Classification (single-target).
        for _ in 0..5 {
            let batch = random_single_batch(&mut rng, 6, 3);
            let schedule = GammaSchedule::shannon_info();
            let mut t = tracker();
            let out = focal_classification(&batch, &schedule, &mut t);
            let labels = match batch.labels() {
                ClassLabels::Single(l) => l.clone(),
                _ => unreachable!(),
            };
            let n = batch.len() as f64;
            let weights = out.per_sample_weight.clone();
            let frozen = |probs: &Matrix| -> f64 {
                labels
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| weights[i] * -clamp_prob(probs.get(i, y)).ln())
                    .sum::<f64>()
                    / n
            };
            for (i, &y) in labels.iter().enumerate() {
                let mut plus = batch.probabilities().clone();
                plus.set(i, y, plus.get(i, y) + step);
                let mut minus = batch.probabilities().clone();
                minus.set(i, y, minus.get(i, y) - step);
                let fd = (frozen(&plus) - frozen(&minus)) / (2.0 * step);
                let analytic = out.grad_wrt_outputs.get(i, y);
                let denom = analytic.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((analytic - fd) / denom).abs() < tol,
                    "sample {i}: analytic {analytic}, fd {fd}"
                );
            }
        }

        // Regression: output and variance gradients.
        for _ in 0..5 {
            let preds = Matrix::from_vec(5, 2, (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let labels =
                Matrix::from_vec(5, 2, (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect());
            let batch = RegressionBatch::single_group(preds, labels, "y").unwrap();
            let v = TaskVariance::from_sigma2(rng.gen_range(0.3..2.0)).unwrap();
            let schedule = GammaSchedule::shannon_info();
            let mut t = tracker();
            let out = focal_regression(
                &batch,
                &[v],
                &schedule,
                &mut t,
                BaseLoss::L2,
                VarianceNormalization::Squared,
            )
            .unwrap();
            let weights = out.per_sample_weight.clone();
            let scale = (batch.len() * batch.target_count()) as f64;
            let frozen = |preds: &Matrix, s: f64| -> f64 {
                let mut acc = 0.0;
                for i in 0..batch.len() {
                    for j in 0..batch.target_count() {
                        let delta = preds.get(i, j) - batch.labels().get(i, j);
                        acc += weights[i * batch.target_count() + j] * delta * delta;
                    }
                }
                acc / scale + s.exp().ln_1p()
            };
            for i in 0..batch.len() {
                for j in 0..batch.target_count() {
                    let mut plus = batch.predictions().clone();
                    plus.set(i, j, plus.get(i, j) + step);
                    let mut minus = batch.predictions().clone();
                    minus.set(i, j, minus.get(i, j) - step);
                    let fd = (frozen(&plus, v.log_value()) - frozen(&minus, v.log_value()))
                        / (2.0 * step);
                    let analytic = out.grad_wrt_outputs.get(i, j);
                    let denom = analytic.abs().max(fd.abs()).max(1e-8);
                    assert!(
                        ((analytic - fd) / denom).abs() < tol,
                        "element ({i},{j}): analytic {analytic}, fd {fd}"
                    );
                }
            }
            let fd_s = (frozen(batch.predictions(), v.log_value() + step)
                - frozen(batch.predictions(), v.log_value() - step))
                / (2.0 * step);
            let analytic_s = out.grad_wrt_variance[0];
            assert!(
                ((analytic_s - fd_s) / analytic_s.abs().max(fd_s.abs()).max(1e-8)).abs() < tol,
                "variance: analytic {analytic_s}, fd {fd_s}"
            );
        }

        // Multiloss variance gradient.
        let preds = Matrix::from_vec(4, 1, vec![0.5, -1.0, 2.0, 0.1]);
        let labels = Matrix::from_vec(4, 1, vec![0.0, -0.5, 1.0, 0.4]);
        let batch = RegressionBatch::single_group(preds, labels, "y").unwrap();
        let v = TaskVariance::from_sigma2(0.6).unwrap();
        let out = multiloss_regression(&batch, &[v], BaseLoss::L2, VarianceNormalization::Squared)
            .unwrap();
        let mean_l2 = plain_regression(&batch, BaseLoss::L2).unwrap().total;
        let frozen = |s: f64| mean_l2 / (2.0 * s.exp()) + s.exp().ln_1p();
        let fd = (frozen(v.log_value() + step) - frozen(v.log_value() - step)) / (2.0 * step);
        let analytic = out.grad_wrt_variance[0];
        assert!(((analytic - fd) / fd.abs().max(1e-8)).abs() < tol);
    }
}
