//! Focusing mathematics: probability of the correct outcome, focal weights,
//! automated focus schedules and the smoothed training-progress tracker.
//!
//! The focus exponent gamma can be fixed, derived from a weight-mass
//! quantile, or set to the information content of a correct prediction.
//! Both automated schedules are deterministic functions of the smoothed
//! batch-mean probability of a correct prediction; no gradient flows
//! through them.

use crate::error::{Error, Result};

/// Default exponential-smoothing factor for the progress tracker.
pub const DEFAULT_SMOOTHING_FACTOR: f64 = 0.95;

/// Default upper bound applied to automated gamma schedules. Both schedules
/// diverge as the progress estimate approaches zero; a bounded gamma keeps
/// the focal weights and gradients finite in the first batches.
pub const DEFAULT_GAMMA_CLAMP: f64 = 10.0;

/// Probability mass assigned to the correct outcome: `p` for an active
/// class, `1 - p` otherwise. Always in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct CorrectProbability(f64);

impl CorrectProbability {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Domain(format!("probability {value} outside [0, 1]")));
        }
        Ok(Self(value))
    }

    /// Clamps into `[0, 1]`. For values already produced by validated
    /// arithmetic (means, CDFs) where only rounding can stray outside.
    pub fn clamped(value: f64) -> Self {
        assert!(!value.is_nan(), "probability is NaN");
        Self(value.clamp(0.0, 1.0))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn complement(self) -> Self {
        Self(1.0 - self.0)
    }
}

impl std::fmt::Display for CorrectProbability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl TryFrom<f64> for CorrectProbability {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

/// Probability of the correct class for one prediction: `p` if the class
/// is active, `1 - p` otherwise.
pub fn p_correct(p: f64, active: bool) -> Result<CorrectProbability> {
    let p = CorrectProbability::new(p)?;
    Ok(if active { p } else { p.complement() })
}

/// Focal weight `(1 - pc)^gamma`. With `gamma = 0` every sample weighs 1;
/// larger gamma pushes weight onto poorly predicted samples. Result is in
/// `[0, 1]`.
pub fn focal_weight(pc: CorrectProbability, gamma: f64) -> f64 {
    assert!(gamma >= 0.0, "gamma must be non-negative, got {gamma}");
    (1.0 - pc.value()).powf(gamma)
}

/// Expected focal-weight exponent `E{1 - p_correct} = 1 - p_hat`.
/// Diagnostics only; nothing trains through it.
pub fn expected_weight_exponent(p_hat: CorrectProbability) -> f64 {
    1.0 - p_hat.value()
}

/// Quantile-based focus: the gamma for which a fraction
/// `k = h * p_hat + (1 - h)` of the total focal-weight mass lies below
/// `p_hat`.
///
/// Diverges to `+inf` as `p_hat -> 0` and converges to `0` as
/// `p_hat -> 1`; the boundary values are returned as such. Callers that
/// need bounded output go through [`GammaSchedule`].
pub fn gamma_quantile(p_hat: CorrectProbability, h: f64) -> f64 {
    assert!(0.0 < h && h < 1.0, "h must lie in (0, 1), got {h}");
    let p = p_hat.value();
    if p <= 0.0 {
        return f64::INFINITY;
    }
    if p >= 1.0 {
        return 0.0;
    }
    let k = h * p + (1.0 - h);
    ((1.0 - k).ln() / (1.0 - p).ln() - 1.0).max(0.0)
}

/// Information-based focus: the Shannon information `-ln(p_hat)` of a
/// correct prediction (natural logarithm). Diverges to `+inf` as
/// `p_hat -> 0`, is exactly `0` at `p_hat = 1`.
pub fn gamma_info(p_hat: CorrectProbability) -> f64 {
    let p = p_hat.value();
    if p <= 0.0 {
        return f64::INFINITY;
    }
    (-p.ln()).max(0.0)
}

/// Focus-selection policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaKind {
    /// Constant focus, `gamma >= 0`.
    Fixed(f64),
    /// Quantile schedule with interpolation parameter `h` in `(0, 1)`.
    QuantileH(f64),
    /// Information schedule, `-ln(p_hat)`.
    ShannonInfo,
}

/// A gamma schedule plus an optional upper clamp.
///
/// The automated kinds default to [`DEFAULT_GAMMA_CLAMP`]; a fixed gamma is
/// never clamped unless a clamp is set explicitly. Emitted gammas are
/// always finite and non-negative: at `p_hat = 0`, where both automated
/// formulas diverge, the schedule returns the clamp (or the default clamp
/// when none is configured).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaSchedule {
    kind: GammaKind,
    clamp_max: Option<f64>,
}

impl GammaSchedule {
    pub fn fixed(gamma0: f64) -> Result<Self> {
        if !gamma0.is_finite() || gamma0 < 0.0 {
            return Err(Error::Domain(format!(
                "fixed gamma must be finite and non-negative, got {gamma0}"
            )));
        }
        Ok(Self {
            kind: GammaKind::Fixed(gamma0),
            clamp_max: None,
        })
    }

    pub fn quantile(h: f64) -> Result<Self> {
        if !(h.is_finite() && 0.0 < h && h < 1.0) {
            return Err(Error::Domain(format!("h must lie in (0, 1), got {h}")));
        }
        Ok(Self {
            kind: GammaKind::QuantileH(h),
            clamp_max: Some(DEFAULT_GAMMA_CLAMP),
        })
    }

    pub fn shannon_info() -> Self {
        Self {
            kind: GammaKind::ShannonInfo,
            clamp_max: Some(DEFAULT_GAMMA_CLAMP),
        }
    }

    /// Replaces the upper clamp. `None` removes it for finite inputs; the
    /// divergence guard at `p_hat = 0` then falls back to the default.
    pub fn with_clamp_max(mut self, clamp_max: Option<f64>) -> Result<Self> {
        if let Some(c) = clamp_max {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::Domain(format!(
                    "clamp_max must be finite and positive, got {c}"
                )));
            }
        }
        self.clamp_max = clamp_max;
        Ok(self)
    }

    pub fn kind(&self) -> GammaKind {
        self.kind
    }

    pub fn clamp_max(&self) -> Option<f64> {
        self.clamp_max
    }

    /// Evaluates the schedule. Finite and `>= 0` for every `p_hat`.
    pub fn gamma(&self, p_hat: CorrectProbability) -> f64 {
        let raw = match self.kind {
            GammaKind::Fixed(g) => g,
            GammaKind::QuantileH(h) => gamma_quantile(p_hat, h),
            GammaKind::ShannonInfo => gamma_info(p_hat),
        };
        if raw.is_infinite() {
            return self.clamp_max.unwrap_or(DEFAULT_GAMMA_CLAMP);
        }
        match self.clamp_max {
            Some(c) => raw.min(c),
            None => raw,
        }
    }
}

/// How a batch is reduced to one progress observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProgressPolicy {
    /// Mean of `p_correct` over all samples.
    SingleTarget,
    /// Positive examples average the probability of their active classes;
    /// negative examples average `1 - p` over their classes.
    MultiTargetAllExamples,
    /// Only examples with at least one active class contribute, averaging
    /// the probability of their active classes. Guards the estimate against
    /// tasks dominated by negative examples.
    MultiTargetPositiveOnly,
}

/// Batch view handed to the progress tracker.
#[derive(Debug, Clone, Copy)]
pub enum ProgressBatch<'a> {
    /// One `p_correct` per sample.
    Single { p_correct: &'a [CorrectProbability] },
    /// Per-class probabilities with activity masks, flat row-major
    /// `[samples x classes]`.
    Multi {
        probs: &'a [f64],
        active: &'a [bool],
        classes: usize,
    },
}

/// Exponentially smoothed estimate of the expected probability of a
/// correct prediction. Empty until the first batch; the first observation
/// initializes it directly.
#[derive(Debug, Clone)]
pub struct ProgressTracker {
    smoothed: Option<f64>,
    smoothing_factor: f64,
    policy: ProgressPolicy,
}

impl ProgressTracker {
    pub fn new(policy: ProgressPolicy) -> Self {
        Self {
            smoothed: None,
            smoothing_factor: DEFAULT_SMOOTHING_FACTOR,
            policy,
        }
    }

    /// Sets the smoothing factor, `0 <= factor < 1`. `0` disables smoothing
    /// (the tracker follows each batch mean exactly).
    pub fn with_smoothing_factor(mut self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && (0.0..1.0).contains(&factor)) {
            return Err(Error::Domain(format!(
                "smoothing factor must lie in [0, 1), got {factor}"
            )));
        }
        self.smoothing_factor = factor;
        Ok(self)
    }

    pub fn policy(&self) -> ProgressPolicy {
        self.policy
    }

    pub fn smoothing_factor(&self) -> f64 {
        self.smoothing_factor
    }

    pub fn smoothed(&self) -> Option<CorrectProbability> {
        self.smoothed.map(CorrectProbability)
    }

    /// Reduces a batch to its policy mean without touching the state.
    /// `Ok(None)` means the policy filtered out every sample.
    pub fn batch_mean(&self, batch: &ProgressBatch<'_>) -> Result<Option<CorrectProbability>> {
        match *batch {
            ProgressBatch::Single { p_correct } => {
                if p_correct.is_empty() {
                    return Ok(None);
                }
                let sum: f64 = p_correct.iter().map(|p| p.value()).sum();
                Ok(Some(CorrectProbability::clamped(
                    sum / p_correct.len() as f64,
                )))
            }
            ProgressBatch::Multi {
                probs,
                active,
                classes,
            } => {
                if probs.len() != active.len() {
                    return Err(Error::Shape(format!(
                        "probs ({}) and active ({}) lengths differ",
                        probs.len(),
                        active.len()
                    )));
                }
                if classes == 0 || probs.len() % classes != 0 {
                    return Err(Error::Shape(format!(
                        "flat batch of {} entries is not a multiple of {} classes",
                        probs.len(),
                        classes
                    )));
                }
                if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(Error::Domain(format!(
                        "class probability {bad} outside [0, 1]"
                    )));
                }
                Ok(self
                    .multi_mean(probs, active, classes)
                    .map(CorrectProbability::clamped))
            }
        }
    }

    fn multi_mean(&self, probs: &[f64], active: &[bool], classes: usize) -> Option<f64> {
        let examples = probs.len() / classes;
        match self.policy {
            // Flat mean of p_correct over every (example, class) element.
            ProgressPolicy::SingleTarget => {
                if examples == 0 {
                    return None;
                }
                let sum: f64 = probs
                    .iter()
                    .zip(active)
                    .map(|(&p, &a)| if a { p } else { 1.0 - p })
                    .sum();
                Some(sum / probs.len() as f64)
            }
            ProgressPolicy::MultiTargetAllExamples => {
                let mut total = 0.0;
                for e in 0..examples {
                    let row = &probs[e * classes..(e + 1) * classes];
                    let mask = &active[e * classes..(e + 1) * classes];
                    let n_active = mask.iter().filter(|a| **a).count();
                    let example_mean = if n_active > 0 {
                        row.iter()
                            .zip(mask)
                            .filter(|(_, a)| **a)
                            .map(|(&p, _)| p)
                            .sum::<f64>()
                            / n_active as f64
                    } else {
                        row.iter().map(|&p| 1.0 - p).sum::<f64>() / classes as f64
                    };
                    total += example_mean;
                }
                if examples == 0 {
                    None
                } else {
                    Some(total / examples as f64)
                }
            }
            ProgressPolicy::MultiTargetPositiveOnly => {
                let mut total = 0.0;
                let mut positives = 0usize;
                for e in 0..examples {
                    let row = &probs[e * classes..(e + 1) * classes];
                    let mask = &active[e * classes..(e + 1) * classes];
                    let n_active = mask.iter().filter(|a| **a).count();
                    if n_active == 0 {
                        continue;
                    }
                    total += row
                        .iter()
                        .zip(mask)
                        .filter(|(_, a)| **a)
                        .map(|(&p, _)| p)
                        .sum::<f64>()
                        / n_active as f64;
                    positives += 1;
                }
                if positives == 0 {
                    None
                } else {
                    Some(total / positives as f64)
                }
            }
        }
    }

    /// Folds one batch into the estimate:
    /// `new = factor * old + (1 - factor) * mean`, with the first batch
    /// setting the estimate directly. Returns the new value, or `None` when
    /// the policy left nothing to average (the tracker is then unchanged —
    /// callers may want to log that).
    pub fn update(&mut self, batch: &ProgressBatch<'_>) -> Result<Option<CorrectProbability>> {
        match self.batch_mean(batch)? {
            Some(mean) => Ok(Some(self.observe_mean(mean))),
            None => Ok(None),
        }
    }

    /// Low-level smoothing step on a precomputed batch mean.
    pub fn observe_mean(&mut self, mean: CorrectProbability) -> CorrectProbability {
        let new = match self.smoothed {
            None => mean.value(),
            Some(old) => (self.smoothing_factor * old
                + (1.0 - self.smoothing_factor) * mean.value())
            .clamp(0.0, 1.0),
        };
        self.smoothed = Some(new);
        CorrectProbability(new)
    }
}
