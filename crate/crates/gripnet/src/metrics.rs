//! Forecast evaluation: point errors, the interval score, CRPS
//! aggregation, empirical coverage, and the static error-quantile
//! baseline.
//!
//! The evaluation protocol scores 90% prediction intervals throughout, so
//! the interval score is used with `alpha = 0.10`. Two modes exist:
//!
//! * *Distributional*: each prediction is a `(point, sigma)` pair
//!   parameterising a truncated normal on `[0, 1]`; the scored interval is
//!   that distribution's 90% highest-density interval and CRPS is
//!   integrated per sample.
//! * *Static*: each prediction is a bare point; the interval is the point
//!   plus/minus a fixed radius (the 90th percentile of validation absolute
//!   errors), clamped to `[0, 1]`. A point forecast's CRPS reduces to its
//!   absolute error, so the reported average CRPS in this mode *is* the
//!   MAE, taken from the same accumulation so the two fields are equal
//!   bit for bit.

use crate::error::{Error, Result};
use crate::probdist::{Interval, TruncatedNormal, SIGMA_FLOOR};
use serde::{Deserialize, Serialize};

/// Coverage level of the evaluation protocol's intervals.
pub const COVERAGE: f64 = 0.9;
/// Interval-score miss penalty parameter, `1 - COVERAGE`.
pub const ALPHA: f64 = 0.1;

/// Aggregated evaluation metrics over one dataset.
///
/// Serialises to a flat JSON object with exactly these six fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub avg_interval_score: f64,
    pub avg_crps: f64,
    pub coverage: f64,
    pub n: usize,
}

/// One model output to be scored: the point estimate, plus the predicted
/// scale when the model produced one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub point: f64,
    pub sigma: Option<f64>,
}

/// How predictions are turned into scored intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    /// Truncated-normal forecasts; intervals are 90% HDIs, CRPS is
    /// integrated. Requires `sigma` on every prediction.
    Distributional,
    /// Fixed-radius intervals around the point estimates; `radius` is the
    /// validation-set 90th-percentile absolute error. Requires `sigma` to
    /// be absent on every prediction.
    Static { radius: f64 },
}

/// Mean absolute error. Errors on empty or mismatched inputs.
pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_paired(preds.len(), labels.len())?;
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y).abs())
        .sum();
    Ok(total / preds.len() as f64)
}

/// Root-mean-square error. Errors on empty or mismatched inputs.
pub fn rmse(preds: &[f64], labels: &[f64]) -> Result<f64> {
    check_paired(preds.len(), labels.len())?;
    let total: f64 = preds
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok((total / preds.len() as f64).sqrt())
}

fn check_paired(n_preds: usize, n_labels: usize) -> Result<()> {
    if n_preds != n_labels {
        return Err(Error::shape(format!(
            "predictions and labels differ in length: {n_preds} vs {n_labels}"
        )));
    }
    if n_preds == 0 {
        return Err(Error::data("cannot evaluate an empty prediction set"));
    }
    Ok(())
}

/// The interval score of a single forecast interval against the outcome:
///
/// ```text
/// S = (hi - lo) + (2/alpha) * (lo - x) * 1{x < lo}
///              + (2/alpha) * (x - hi) * 1{x > hi}
/// ```
///
/// Equals the width exactly when the outcome is covered, and adds a
/// `2/alpha`-scaled penalty for the excursion otherwise. Lower is better.
pub fn interval_score(iv: &Interval, x: f64, alpha: f64) -> f64 {
    let mut score = iv.hi - iv.lo;
    if x < iv.lo {
        score += 2.0 / alpha * (iv.lo - x);
    }
    if x > iv.hi {
        score += 2.0 / alpha * (x - iv.hi);
    }
    score
}

/// The nearest-rank 90th percentile of a set of absolute errors: sort
/// ascending and take the element at 1-based index `ceil(0.9 * n)`. No
/// interpolation, so the result is always one of the input values.
pub fn e90_threshold(abs_errors: &[f64]) -> Result<f64> {
    if abs_errors.is_empty() {
        return Err(Error::data(
            "e90 threshold of an empty error list is undefined",
        ));
    }
    if let Some(bad) = abs_errors.iter().find(|e| !e.is_finite() || **e < 0.0) {
        return Err(Error::numeric(format!(
            "absolute error {bad} is not a finite nonnegative number"
        )));
    }
    let mut sorted = abs_errors.to_vec();
    sorted.sort_by(|p, q| p.partial_cmp(q).expect("finite errors"));
    let rank = (0.9 * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank - 1])
}

/// The static baseline interval: the point estimate plus/minus a fixed
/// radius, clamped to the friction-factor range `[0, 1]`.
pub fn static_interval(point: f64, radius: f64) -> Interval {
    Interval {
        lo: (point - radius).max(0.0),
        hi: (point + radius).min(1.0),
        coverage_target: COVERAGE,
    }
}

/// Scores a prediction set against labels and aggregates per-sample means
/// into an [`EvalReport`].
///
/// In distributional mode each prediction's scale is floored at
/// [`SIGMA_FLOOR`] before the truncated normal is built, mirroring the
/// floor the training loss applies. Accumulation order is the sample
/// order, so a fixed input yields a bitwise-fixed report.
pub fn evaluate(predictions: &[Prediction], labels: &[f64], mode: EvalMode) -> Result<EvalReport> {
    check_paired(predictions.len(), labels.len())?;
    let n = predictions.len();
    let points: Vec<f64> = predictions.iter().map(|p| p.point).collect();
    let mae = mae(&points, labels)?;
    let rmse = rmse(&points, labels)?;

    let mut score_sum = 0.0;
    let mut crps_sum = 0.0;
    let mut covered = 0usize;
    match mode {
        EvalMode::Distributional => {
            for (i, (pred, &y)) in predictions.iter().zip(labels).enumerate() {
                let sigma = pred.sigma.ok_or_else(|| {
                    Error::data(format!(
                        "distributional evaluation needs a sigma, but prediction {i} has none"
                    ))
                })?;
                let d = TruncatedNormal::new(pred.point, sigma.max(SIGMA_FLOOR), 0.0, 1.0)?;
                let iv = d.interval(COVERAGE)?;
                score_sum += interval_score(&iv, y, ALPHA);
                crps_sum += d.crps(y)?;
                covered += usize::from(iv.contains(y));
            }
        }
        EvalMode::Static { radius } => {
            if !radius.is_finite() || radius < 0.0 {
                return Err(Error::numeric(format!(
                    "static interval radius {radius} is not a finite nonnegative number"
                )));
            }
            for (i, (pred, &y)) in predictions.iter().zip(labels).enumerate() {
                if pred.sigma.is_some() {
                    return Err(Error::data(format!(
                        "static evaluation scores bare points, but prediction {i} carries a sigma"
                    )));
                }
                let iv = static_interval(pred.point, radius);
                score_sum += interval_score(&iv, y, ALPHA);
                covered += usize::from(iv.contains(y));
            }
        }
    }
    let avg_crps = match mode {
        // A point forecast's CRPS is its absolute error, so the average is
        // the MAE itself - the same number, not a re-integration.
        EvalMode::Static { .. } => mae,
        EvalMode::Distributional => crps_sum / n as f64,
    };
    Ok(EvalReport {
        mae,
        rmse,
        avg_interval_score: score_sum / n as f64,
        avg_crps,
        coverage: covered as f64 / n as f64,
        n,
    })
}
