#ifndef AUTOFOCAL_H
#define AUTOFOCAL_H

/* Generated by cbindgen from autofocal-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of a fallible call.
typedef enum AfStatus {
  // Success; output pointers are valid.
  AF_STATUS_OK = 0,
  // A required pointer argument was null.
  AF_STATUS_NULL_ARGUMENT = 1,
  // A numeric argument was outside its domain.
  AF_STATUS_INVALID_ARGUMENT = 2,
  // The batch was empty (or the policy filtered every sample); the
  // tracker is unchanged.
  AF_STATUS_EMPTY_BATCH = 3,
  // The tracker has not seen a batch yet.
  AF_STATUS_NO_VALUE = 4,
} AfStatus;

// Progress-reduction policy of a tracker.
typedef enum AfProgressPolicy {
  AF_PROGRESS_POLICY_SINGLE_TARGET = 0,
  AF_PROGRESS_POLICY_MULTI_TARGET_ALL_EXAMPLES = 1,
  AF_PROGRESS_POLICY_MULTI_TARGET_POSITIVE_ONLY = 2,
} AfProgressPolicy;

// Denominator of the regression error normalization.
typedef enum AfVarianceNormalization {
  // `|dx| / sigma^2` (the default form).
  AF_VARIANCE_NORMALIZATION_SQUARED = 0,
  // `|dx| / sigma`.
  AF_VARIANCE_NORMALIZATION_STD = 1,
} AfVarianceNormalization;

// Opaque gamma schedule handle.
typedef struct AfSchedule AfSchedule;

// Opaque progress tracker handle.
typedef struct AfTracker AfTracker;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Probability of the correct outcome: `p` when `active` is nonzero,
// `1 - p` otherwise. Fails with `AF_STATUS_INVALID_ARGUMENT` when `p` is
// outside `[0, 1]`.
enum AfStatus af_p_correct(double p, int active, double *out);

// Focal weight `(1 - p_correct)^gamma`; `gamma` must be non-negative and
// `p_correct` in `[0, 1]`.
enum AfStatus af_focal_weight(double pc, double gamma, double *out);

// Expected focal-weight exponent, `1 - p_hat`.
enum AfStatus af_expected_weight_exponent(double p_hat, double *out);

// Constant-focus schedule; null when `gamma0` is negative or not finite.
struct AfSchedule *af_schedule_fixed(double gamma0);

// Quantile schedule with interpolation parameter `h` in `(0, 1)`; null on
// invalid `h`.
struct AfSchedule *af_schedule_quantile(double h);

// Information schedule `gamma = -ln(p_hat)`.
struct AfSchedule *af_schedule_shannon_info(void);

// Replaces the schedule's upper clamp; `clamp_max` must be positive.
enum AfStatus af_schedule_set_clamp_max(struct AfSchedule *schedule, double clamp_max);

// Removes the clamp for finite inputs; the divergence guard at
// `p_hat = 0` still returns the default cap.
enum AfStatus af_schedule_clear_clamp_max(struct AfSchedule *schedule);

// Evaluates the schedule at a progress estimate in `[0, 1]`. The output
// is always finite and non-negative.
enum AfStatus af_schedule_gamma(const struct AfSchedule *schedule, double p_hat, double *out);

void af_schedule_free(struct AfSchedule *schedule);

// New tracker with the given policy and smoothing factor in `[0, 1)`;
// null on an invalid factor.
struct AfTracker *af_tracker_new(enum AfProgressPolicy policy, double smoothing_factor);

// Folds a batch of per-sample `p_correct` values into the estimate.
// Writes the new smoothed value to `new_smoothed` when non-null. An empty
// batch returns `AF_STATUS_EMPTY_BATCH` and leaves the tracker unchanged.
enum AfStatus af_tracker_update_single(struct AfTracker *tracker,
                                       const double *p_correct,
                                       uintptr_t len,
                                       double *new_smoothed);

// Folds a multi-target batch: `probs` and `active` are flat row-major
// `[len]` arrays with `classes` entries per example (`active` uses 0/1).
enum AfStatus af_tracker_update_multi(struct AfTracker *tracker,
                                      const double *probs,
                                      const uint8_t *active,
                                      uintptr_t len,
                                      uintptr_t classes,
                                      double *new_smoothed);

// Current smoothed estimate; `AF_STATUS_NO_VALUE` before the first batch.
enum AfStatus af_tracker_smoothed(const struct AfTracker *tracker, double *out);

void af_tracker_free(struct AfTracker *tracker);

// Probability that a prediction error `delta` beats the assumed Gaussian
// label noise with variance `sigma2 > 0`.
enum AfStatus af_regression_p_correct(double delta,
                                      double sigma2,
                                      enum AfVarianceNormalization normalization,
                                      double *out);

// Standard normal cumulative distribution function.
double af_normal_cdf(double x);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUTOFOCAL_H */
