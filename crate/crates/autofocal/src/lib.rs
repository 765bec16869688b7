//! Progress-adaptive focal losses with a desk-scale trainer.
//!
//! The focal family scales a base loss per sample by `(1 - p_correct)^gamma`,
//! concentrating gradient on poorly predicted samples. Here gamma is not a
//! hand-tuned constant: it is derived each step from a smoothed estimate of
//! the probability of a correct prediction, so the focus relaxes as training
//! progresses. The same machinery extends to regression by mapping errors to
//! probabilities through a Gaussian noise model with a learned task variance.
//!
//! | Module | Contents |
//! |---|---|
//! | [`focal`] | `p_correct`, focal weights, gamma schedules, progress tracker |
//! | [`losses`] | focused cross entropy, focal regression, baseline losses |
//! | [`nn`] | MLP, reverse-mode gradients, Adam, exponential LR decay |
//! | [`data`] | synthetic imbalanced/noisy datasets, CSV ingestion |
//! | [`metrics`] | run traces, classification metrics, convergence detection |
//! | [`harness`] | experiment configs, training loop, comparisons, plots |

pub mod data;
pub mod error;
pub mod focal;
pub mod harness;
pub mod losses;
pub mod mat;
pub mod metrics;
pub mod nn;
// Coefficients and reference values are kept verbatim from the ported
// source, beyond f64 precision where the original carried more digits.
#[allow(clippy::excessive_precision)]
pub mod normal;

pub use error::{Error, Result};
pub use mat::Matrix;
