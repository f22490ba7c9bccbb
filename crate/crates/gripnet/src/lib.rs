//! Probabilistic regression of a road-grip friction factor from camera images.
//!
//! The library trains and evaluates a two-head convolutional network. A
//! residual feature backbone feeds a point-estimate head (a single fully
//! connected layer) and a prediction-interval head (a small fully connected
//! stack that also sees the point estimate). The interval head parameterises
//! a normal distribution truncated to `[0, 1]`, so a forecast is a full
//! distribution over the normalised friction factor rather than a bare
//! number.
//!
//! # Module map
//!
//! * [`probdist`] - the truncated normal distribution: density, distribution
//!   function, quantiles, highest-density intervals, CRPS, sampling, and the
//!   negative log-likelihood used as the interval-head training loss.
//! * [`metrics`] - forecast evaluation: MAE, RMSE, mean interval score,
//!   coverage, CRPS aggregation, and the static error-quantile baseline.
//! * [`tensor`] - a small reverse-mode autodiff engine over dense row-major
//!   arrays with the operations the model needs (convolution, batch
//!   normalisation, matrix multiply, pooling, dropout, the losses) and a
//!   momentum SGD step.
//! * [`model`] - the network itself: configuration presets, seeded
//!   initialisation, forward passes, parameter/FLOP accounting, and the
//!   binary weight-file format.
//! * [`train`] - the two-stage training pipeline (point head first, then the
//!   frozen-backbone interval stage), the joint-training ablation, data
//!   augmentation, and derived per-purpose random streams.
//! * [`data`] - dataset plumbing: CSV manifests, group-aware splits, label
//!   normalisation, the bird's-eye-view perspective warp, pixel
//!   standardisation, and a synthetic heteroscedastic generator.
//! * [`cli`] - the `gripnet` command-line front end (`synth`, `train`,
//!   `eval`, `predict`, `inspect`).
//!
//! # Design notes
//!
//! * All distribution mathematics is done in `f64`; network storage is
//!   `f32`. The autodiff engine is generic over the element type so its
//!   gradient rules can be verified against finite differences in `f64`,
//!   where discretisation noise does not mask real defects.
//! * Every fallible operation returns [`Error`]; panics are reserved for
//!   violated internal invariants, never for bad input.
//! * Determinism is a feature: a fixed seed fixes initialisation, shuffling,
//!   dropout masks, augmentation draws and therefore the trained weights,
//!   bit for bit, at a given thread count (the engine is single-threaded).
//!
//! # Quick start
//!
//! ```
//! use gripnet::probdist::TruncatedNormal;
//!
//! let d = TruncatedNormal::new(0.42, 0.08, 0.0, 1.0).unwrap();
//! let ninety = d.interval(0.9).unwrap();
//! assert!(ninety.lo < 0.42 && ninety.hi > 0.42);
//! ```

pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod probdist;
pub mod model;
mod seeding;
pub mod special;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
