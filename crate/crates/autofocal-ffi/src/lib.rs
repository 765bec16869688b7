//! C ABI over the focusing math: probabilities, focal weights, gamma
//! schedules, the progress tracker and the regression error model.
//!
//! Conventions:
//!
//! * Schedules and trackers are opaque handles created by `af_*_new`-style
//!   constructors and released with the matching `af_*_free`. Constructors
//!   return null on invalid arguments.
//! * Every fallible call returns an [`AfStatus`]; outputs go through
//!   pointers that are written only on `AF_STATUS_OK`.
//! * No call panics across the boundary; invalid input is reported through
//!   the status code.
//!
//! The generated header lives at `include/autofocal.h`.
//!
//! Safety across the whole surface: handle pointers must come from the
//! matching constructor and not have been freed; array pointers must be
//! valid for the stated length. Free functions accept null as a no-op.

// The per-function safety contract is the uniform one stated above; the
// doc comments travel into the C header, where a Rust-style `# Safety`
// heading would be noise.
#![allow(clippy::missing_safety_doc)]

use std::os::raw::c_int;

use autofocal::focal::{
    expected_weight_exponent, focal_weight, p_correct, CorrectProbability, GammaSchedule,
    ProgressBatch, ProgressPolicy, ProgressTracker,
};
use autofocal::losses::{regression_p_correct, TaskVariance, VarianceNormalization};
use autofocal::normal::normal_cdf;

/// Result of a fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfStatus {
    /// Success; output pointers are valid.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A numeric argument was outside its domain.
    InvalidArgument = 2,
    /// The batch was empty (or the policy filtered every sample); the
    /// tracker is unchanged.
    EmptyBatch = 3,
    /// The tracker has not seen a batch yet.
    NoValue = 4,
}

/// Progress-reduction policy of a tracker.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfProgressPolicy {
    SingleTarget = 0,
    MultiTargetAllExamples = 1,
    MultiTargetPositiveOnly = 2,
}

impl From<AfProgressPolicy> for ProgressPolicy {
    fn from(policy: AfProgressPolicy) -> Self {
        match policy {
            AfProgressPolicy::SingleTarget => ProgressPolicy::SingleTarget,
            AfProgressPolicy::MultiTargetAllExamples => ProgressPolicy::MultiTargetAllExamples,
            AfProgressPolicy::MultiTargetPositiveOnly => ProgressPolicy::MultiTargetPositiveOnly,
        }
    }
}

/// Denominator of the regression error normalization.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfVarianceNormalization {
    /// `|dx| / sigma^2` (the default form).
    Squared = 0,
    /// `|dx| / sigma`.
    Std = 1,
}

/// Opaque gamma schedule handle.
pub struct AfSchedule(GammaSchedule);

/// Opaque progress tracker handle.
pub struct AfTracker(ProgressTracker);

/// Probability of the correct outcome: `p` when `active` is nonzero,
/// `1 - p` otherwise. Fails with `AF_STATUS_INVALID_ARGUMENT` when `p` is
/// outside `[0, 1]`.
#[no_mangle]
pub unsafe extern "C" fn af_p_correct(p: f64, active: c_int, out: *mut f64) -> AfStatus {
    let Some(out) = out.as_mut() else {
        return AfStatus::NullArgument;
    };
    match p_correct(p, active != 0) {
        Ok(pc) => {
            *out = pc.value();
            AfStatus::Ok
        }
        Err(_) => AfStatus::InvalidArgument,
    }
}

/// Focal weight `(1 - p_correct)^gamma`; `gamma` must be non-negative and
/// `p_correct` in `[0, 1]`.
#[no_mangle]
pub unsafe extern "C" fn af_focal_weight(pc: f64, gamma: f64, out: *mut f64) -> AfStatus {
    let Some(out) = out.as_mut() else {
        return AfStatus::NullArgument;
    };
    if !(gamma.is_finite() && gamma >= 0.0) {
        return AfStatus::InvalidArgument;
    }
    match CorrectProbability::new(pc) {
        Ok(pc) => {
            *out = focal_weight(pc, gamma);
            AfStatus::Ok
        }
        Err(_) => AfStatus::InvalidArgument,
    }
}

/// Expected focal-weight exponent, `1 - p_hat`.
#[no_mangle]
pub unsafe extern "C" fn af_expected_weight_exponent(p_hat: f64, out: *mut f64) -> AfStatus {
    let Some(out) = out.as_mut() else {
        return AfStatus::NullArgument;
    };
    match CorrectProbability::new(p_hat) {
        Ok(p) => {
            *out = expected_weight_exponent(p);
            AfStatus::Ok
        }
        Err(_) => AfStatus::InvalidArgument,
    }
}

/// Constant-focus schedule; null when `gamma0` is negative or not finite.
#[no_mangle]
pub extern "C" fn af_schedule_fixed(gamma0: f64) -> *mut AfSchedule {
    match GammaSchedule::fixed(gamma0) {
        Ok(s) => Box::into_raw(Box::new(AfSchedule(s))),
        Err(_) => std::ptr::null_mut(),
    }
}

/// Quantile schedule with interpolation parameter `h` in `(0, 1)`; null on
/// invalid `h`.
#[no_mangle]
pub extern "C" fn af_schedule_quantile(h: f64) -> *mut AfSchedule {
    match GammaSchedule::quantile(h) {
        Ok(s) => Box::into_raw(Box::new(AfSchedule(s))),
        Err(_) => std::ptr::null_mut(),
    }
}

/// Information schedule `gamma = -ln(p_hat)`.
#[no_mangle]
pub extern "C" fn af_schedule_shannon_info() -> *mut AfSchedule {
    Box::into_raw(Box::new(AfSchedule(GammaSchedule::shannon_info())))
}

/// Replaces the schedule's upper clamp; `clamp_max` must be positive.
#[no_mangle]
pub unsafe extern "C" fn af_schedule_set_clamp_max(
    schedule: *mut AfSchedule,
    clamp_max: f64,
) -> AfStatus {
    let Some(schedule) = schedule.as_mut() else {
        return AfStatus::NullArgument;
    };
    match schedule.0.with_clamp_max(Some(clamp_max)) {
        Ok(s) => {
            schedule.0 = s;
            AfStatus::Ok
        }
        Err(_) => AfStatus::InvalidArgument,
    }
}

/// Removes the clamp for finite inputs; the divergence guard at
/// `p_hat = 0` still returns the default cap.
#[no_mangle]
pub unsafe extern "C" fn af_schedule_clear_clamp_max(schedule: *mut AfSchedule) -> AfStatus {
    let Some(schedule) = schedule.as_mut() else {
        return AfStatus::NullArgument;
    };
    schedule.0 = schedule
        .0
        .with_clamp_max(None)
        .expect("removing a clamp cannot fail");
    AfStatus::Ok
}

/// Evaluates the schedule at a progress estimate in `[0, 1]`. The output
/// is always finite and non-negative.
#[no_mangle]
pub unsafe extern "C" fn af_schedule_gamma(
    schedule: *const AfSchedule,
    p_hat: f64,
    out: *mut f64,
) -> AfStatus {
    let Some(schedule) = schedule.as_ref() else {
        return AfStatus::NullArgument;
    };
    let Some(out) = out.as_mut() else {
        return AfStatus::NullArgument;
    };
    match CorrectProbability::new(p_hat) {
        Ok(p) => {
            *out = schedule.0.gamma(p);
            AfStatus::Ok
        }
        Err(_) => AfStatus::InvalidArgument,
    }
}

#[no_mangle]
pub unsafe extern "C" fn af_schedule_free(schedule: *mut AfSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// New tracker with the given policy and smoothing factor in `[0, 1)`;
/// null on an invalid factor.
#[no_mangle]
pub extern "C" fn af_tracker_new(
    policy: AfProgressPolicy,
    smoothing_factor: f64,
) -> *mut AfTracker {
    match ProgressTracker::new(policy.into()).with_smoothing_factor(smoothing_factor) {
        Ok(t) => Box::into_raw(Box::new(AfTracker(t))),
        Err(_) => std::ptr::null_mut(),
    }
}

/// Folds a batch of per-sample `p_correct` values into the estimate.
/// Writes the new smoothed value to `new_smoothed` when non-null. An empty
/// batch returns `AF_STATUS_EMPTY_BATCH` and leaves the tracker unchanged.
#[no_mangle]
pub unsafe extern "C" fn af_tracker_update_single(
    tracker: *mut AfTracker,
    p_correct: *const f64,
    len: usize,
    new_smoothed: *mut f64,
) -> AfStatus {
    let Some(tracker) = tracker.as_mut() else {
        return AfStatus::NullArgument;
    };
    if len > 0 && p_correct.is_null() {
        return AfStatus::NullArgument;
    }
    let values = if len == 0 {
        &[]
    } else {
        std::slice::from_raw_parts(p_correct, len)
    };
    let mut batch = Vec::with_capacity(len);
    for &v in values {
        match CorrectProbability::new(v) {
            Ok(p) => batch.push(p),
            Err(_) => return AfStatus::InvalidArgument,
        }
    }
    match tracker
        .0
        .update(&ProgressBatch::Single { p_correct: &batch })
    {
        Ok(Some(p)) => {
            if let Some(out) = new_smoothed.as_mut() {
                *out = p.value();
            }
            AfStatus::Ok
        }
        Ok(None) => AfStatus::EmptyBatch,
        Err(_) => AfStatus::InvalidArgument,
    }
}

/// Folds a multi-target batch: `probs` and `active` are flat row-major
/// `[len]` arrays with `classes` entries per example (`active` uses 0/1).
#[no_mangle]
pub unsafe extern "C" fn af_tracker_update_multi(
    tracker: *mut AfTracker,
    probs: *const f64,
    active: *const u8,
    len: usize,
    classes: usize,
    new_smoothed: *mut f64,
) -> AfStatus {
    let Some(tracker) = tracker.as_mut() else {
        return AfStatus::NullArgument;
    };
    if len > 0 && (probs.is_null() || active.is_null()) {
        return AfStatus::NullArgument;
    }
    if len == 0 {
        return AfStatus::EmptyBatch;
    }
    let probs = std::slice::from_raw_parts(probs, len);
    let active: Vec<bool> = std::slice::from_raw_parts(active, len)
        .iter()
        .map(|&b| b != 0)
        .collect();
    match tracker.0.update(&ProgressBatch::Multi {
        probs,
        active: &active,
        classes,
    }) {
        Ok(Some(p)) => {
            if let Some(out) = new_smoothed.as_mut() {
                *out = p.value();
            }
            AfStatus::Ok
        }
        Ok(None) => AfStatus::EmptyBatch,
        Err(_) => AfStatus::InvalidArgument,
    }
}

/// Current smoothed estimate; `AF_STATUS_NO_VALUE` before the first batch.
#[no_mangle]
pub unsafe extern "C" fn af_tracker_smoothed(tracker: *const AfTracker, out: *mut f64) -> AfStatus {
    let Some(tracker) = tracker.as_ref() else {
        return AfStatus::NullArgument;
    };
    let Some(out) = out.as_mut() else {
        return AfStatus::NullArgument;
    };
    match tracker.0.smoothed() {
        Some(p) => {
            *out = p.value();
            AfStatus::Ok
        }
        None => AfStatus::NoValue,
    }
}

#[no_mangle]
pub unsafe extern "C" fn af_tracker_free(tracker: *mut AfTracker) {
    if !tracker.is_null() {
        drop(Box::from_raw(tracker));
    }
}

/// Probability that a prediction error `delta` beats the assumed Gaussian
/// label noise with variance `sigma2 > 0`.
#[no_mangle]
pub unsafe extern "C" fn af_regression_p_correct(
    delta: f64,
    sigma2: f64,
    normalization: AfVarianceNormalization,
    out: *mut f64,
) -> AfStatus {
    let Some(out) = out.as_mut() else {
        return AfStatus::NullArgument;
    };
    if !delta.is_finite() {
        return AfStatus::InvalidArgument;
    }
    let Ok(variance) = TaskVariance::from_sigma2(sigma2) else {
        return AfStatus::InvalidArgument;
    };
    let normalization = match normalization {
        AfVarianceNormalization::Squared => VarianceNormalization::Squared,
        AfVarianceNormalization::Std => VarianceNormalization::Std,
    };
    *out = regression_p_correct(delta, variance, normalization);
    AfStatus::Ok
}

/// Standard normal cumulative distribution function.
#[no_mangle]
pub extern "C" fn af_normal_cdf(x: f64) -> f64 {
    normal_cdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p_correct_and_focal_weight_round_trip() {
        let mut out = 0.0;
        unsafe {
            assert_eq!(af_p_correct(0.9, 1, &mut out), AfStatus::Ok);
            assert_eq!(out, 0.9);
            assert_eq!(af_p_correct(0.9, 0, &mut out), AfStatus::Ok);
            assert!((out - 0.1).abs() < 1e-15);
            assert_eq!(af_p_correct(1.5, 1, &mut out), AfStatus::InvalidArgument);
            assert_eq!(
                af_p_correct(0.5, 1, std::ptr::null_mut()),
                AfStatus::NullArgument
            );

            assert_eq!(af_focal_weight(0.5, 2.0, &mut out), AfStatus::Ok);
            assert_eq!(out, 0.25);
            assert_eq!(
                af_focal_weight(0.5, -1.0, &mut out),
                AfStatus::InvalidArgument
            );

            assert_eq!(af_expected_weight_exponent(0.7, &mut out), AfStatus::Ok);
            assert!((out - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn schedules_match_core_and_validate() {
        unsafe {
            let info = af_schedule_shannon_info();
            assert!(!info.is_null());
            let mut gamma = 0.0;
            assert_eq!(
                af_schedule_gamma(info, (-1.0f64).exp(), &mut gamma),
                AfStatus::Ok
            );
            assert!((gamma - 1.0).abs() < 1e-12);
            assert_eq!(af_schedule_gamma(info, 0.0, &mut gamma), AfStatus::Ok);
            assert_eq!(gamma, 10.0); // default clamp
            assert_eq!(
                af_schedule_gamma(info, 1.5, &mut gamma),
                AfStatus::InvalidArgument
            );
            assert_eq!(af_schedule_set_clamp_max(info, 0.5,), AfStatus::Ok);
            assert_eq!(af_schedule_gamma(info, 0.1, &mut gamma), AfStatus::Ok);
            assert_eq!(gamma, 0.5);
            assert_eq!(af_schedule_clear_clamp_max(info), AfStatus::Ok);
            assert_eq!(af_schedule_gamma(info, 0.1, &mut gamma), AfStatus::Ok);
            assert!((gamma - std::f64::consts::LN_10).abs() < 1e-12);
            af_schedule_free(info);

            let quantile = af_schedule_quantile(0.7);
            assert!(!quantile.is_null());
            assert_eq!(af_schedule_gamma(quantile, 0.5, &mut gamma), AfStatus::Ok);
            assert!((gamma - 0.5145731728297582).abs() < 1e-12);
            af_schedule_free(quantile);

            assert!(af_schedule_quantile(1.0).is_null());
            assert!(af_schedule_fixed(-2.0).is_null());
            assert_eq!(
                af_schedule_gamma(std::ptr::null(), 0.5, &mut gamma),
                AfStatus::NullArgument
            );
        }
    }

    #[test]
    fn tracker_lifecycle_and_smoothing() {
        unsafe {
            let tracker = af_tracker_new(AfProgressPolicy::SingleTarget, 0.95);
            assert!(!tracker.is_null());
            let mut out = 0.0;
            assert_eq!(af_tracker_smoothed(tracker, &mut out), AfStatus::NoValue);

            let first = [0.5];
            assert_eq!(
                af_tracker_update_single(tracker, first.as_ptr(), 1, &mut out),
                AfStatus::Ok
            );
            assert_eq!(out, 0.5);

            let second = [0.7];
            assert_eq!(
                af_tracker_update_single(tracker, second.as_ptr(), 1, &mut out),
                AfStatus::Ok
            );
            assert!((out - 0.51).abs() < 1e-12);

            assert_eq!(
                af_tracker_update_single(tracker, std::ptr::null(), 0, &mut out),
                AfStatus::EmptyBatch
            );
            let bad = [1.5];
            assert_eq!(
                af_tracker_update_single(tracker, bad.as_ptr(), 1, &mut out),
                AfStatus::InvalidArgument
            );
            af_tracker_free(tracker);

            assert!(af_tracker_new(AfProgressPolicy::SingleTarget, 1.0).is_null());
        }
    }

    #[test]
    fn tracker_multi_policy_matches_core_example() {
        unsafe {
            let tracker = af_tracker_new(AfProgressPolicy::MultiTargetPositiveOnly, 0.95);
            let probs = [0.8, 0.6, 0.1, 0.2, 0.3, 0.4];
            let active = [1u8, 1, 0, 0, 0, 0];
            let mut out = 0.0;
            assert_eq!(
                af_tracker_update_multi(tracker, probs.as_ptr(), active.as_ptr(), 6, 3, &mut out),
                AfStatus::Ok
            );
            assert!((out - 0.7).abs() < 1e-12);

            // All-negative batch under the positive-only policy.
            let neg_active = [0u8; 6];
            assert_eq!(
                af_tracker_update_multi(
                    tracker,
                    probs.as_ptr(),
                    neg_active.as_ptr(),
                    6,
                    3,
                    &mut out
                ),
                AfStatus::EmptyBatch
            );
            af_tracker_free(tracker);
        }
    }

    #[test]
    fn regression_probability_matches_core() {
        unsafe {
            let mut out = 0.0;
            assert_eq!(
                af_regression_p_correct(1.96, 1.0, AfVarianceNormalization::Squared, &mut out),
                AfStatus::Ok
            );
            assert!((out - 0.04999579).abs() < 1e-6);
            assert_eq!(
                af_regression_p_correct(0.0, 1.0, AfVarianceNormalization::Squared, &mut out),
                AfStatus::Ok
            );
            assert_eq!(out, 1.0);
            assert_eq!(
                af_regression_p_correct(1.0, 0.0, AfVarianceNormalization::Squared, &mut out),
                AfStatus::InvalidArgument
            );
            assert_eq!(
                af_regression_p_correct(
                    f64::INFINITY,
                    1.0,
                    AfVarianceNormalization::Squared,
                    &mut out
                ),
                AfStatus::InvalidArgument
            );
        }
        assert!((af_normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((af_normal_cdf(1.96) - 0.9750021048517796).abs() < 1e-12);
    }

    #[test]
    fn header_is_generated_with_the_expected_surface() {
        let header =
            std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/autofocal.h"))
                .expect("build.rs generated the header");
        for symbol in [
            "af_p_correct",
            "af_focal_weight",
            "af_schedule_quantile",
            "af_schedule_gamma",
            "af_tracker_update_single",
            "af_tracker_update_multi",
            "af_regression_p_correct",
            "af_normal_cdf",
            "typedef struct AfSchedule AfSchedule;",
            "typedef struct AfTracker AfTracker;",
        ] {
            assert!(header.contains(symbol), "header is missing '{symbol}'");
        }
    }
}
