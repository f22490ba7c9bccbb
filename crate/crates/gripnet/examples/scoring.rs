//! Scoring probabilistic forecasts: interval score, continuous ranked
//! probability score, coverage, and the static-interval baseline that
//! distributional intervals are judged against.
//!
//! ```text
//! cargo run --example scoring
//! ```

use gripnet::metrics::{
    e90_threshold, evaluate, interval_score, EvalMode, Prediction, ALPHA, COVERAGE,
};
use gripnet::probdist::TruncatedNormal;
use gripnet::Result;

fn main() -> Result<()> {
    // The interval score rewards narrow intervals and charges 2/alpha
    // per unit of excursion when the truth falls outside.
    let d = TruncatedNormal::new(0.6, 0.1, 0.0, 1.0)?;
    let iv = d.interval(COVERAGE)?;
    println!("interval [{:.3}, {:.3}] at {:.0}% coverage:", iv.lo, iv.hi, COVERAGE * 100.0);
    for y in [0.62, 0.45, 0.95] {
        let covered = if iv.contains(y) { "inside" } else { "outside" };
        println!("  truth {y:.2} ({covered}): score {:.4}", interval_score(&iv, y, ALPHA));
    }

    // CRPS generalizes absolute error to whole distributions: a sharp
    // correct forecast beats a vague one, and a sharp wrong forecast
    // loses to both.
    println!("crps for truth 0.62:");
    for (label, mu, sigma) in [
        ("sharp and right", 0.62, 0.05),
        ("vague and right", 0.62, 0.30),
        ("sharp but wrong", 0.40, 0.05),
    ] {
        let f = TruncatedNormal::new(mu, sigma, 0.0, 1.0)?;
        println!("  {label:16} {:.4}", f.crps(0.62)?);
    }

    // A full evaluation over a small batch, first distributionally.
    let preds = vec![
        Prediction { point: 0.58, sigma: Some(0.08) },
        Prediction { point: 0.31, sigma: Some(0.12) },
        Prediction { point: 0.74, sigma: Some(0.05) },
        Prediction { point: 0.45, sigma: Some(0.20) },
    ];
    let labels = [0.60, 0.35, 0.70, 0.52];
    let report = evaluate(&preds, &labels, EvalMode::Distributional)?;
    println!(
        "distributional: mae {:.4}, interval score {:.4}, crps {:.4}, coverage {:.2}",
        report.mae, report.avg_interval_score, report.avg_crps, report.coverage
    );

    // The static baseline builds every interval with one radius, the
    // 90th percentile of held-out absolute errors. Its average crps is
    // the mae by definition: a point forecast's crps is its absolute
    // error.
    let val_errors = [0.02, 0.05, 0.01, 0.08, 0.03, 0.11, 0.04, 0.06, 0.02, 0.07];
    let radius = e90_threshold(&val_errors)?;
    let bare: Vec<Prediction> = preds
        .iter()
        .map(|p| Prediction { point: p.point, sigma: None })
        .collect();
    let baseline = evaluate(&bare, &labels, EvalMode::Static { radius })?;
    println!(
        "static (radius {:.3}): interval score {:.4}, crps {:.4} == mae {:.4}",
        radius, baseline.avg_interval_score, baseline.avg_crps, baseline.mae
    );
    Ok(())
}
