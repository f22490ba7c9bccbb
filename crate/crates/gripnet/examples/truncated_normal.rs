//! Tour of the truncated-normal distribution: densities, tail-safe
//! cdf and quantile, sampling, likelihoods, and shortest prediction
//! intervals, including the boundary-pinned cases.
//!
//! ```text
//! cargo run --example truncated_normal
//! ```

use gripnet::probdist::TruncatedNormal;
use gripnet::Result;

fn main() -> Result<()> {
    // A friction forecast: centre 0.62, spread 0.11, bounded to [0, 1].
    let d = TruncatedNormal::new(0.62, 0.11, 0.0, 1.0)?;
    println!("forecast: centre {:.2}, spread {:.2} on [0, 1]", d.mu(), d.sigma());
    println!("  pdf(0.62) = {:.4}   pdf(0.95) = {:.4}", d.pdf(0.62), d.pdf(0.95));
    println!("  cdf(0.50) = {:.4}   cdf(0.80) = {:.4}", d.cdf(0.50), d.cdf(0.80));
    println!("  median    = {:.4}", d.quantile(0.5)?);

    // The quantile function inverts the cdf even deep in the tails,
    // where naive formulations lose all precision.
    let deep = d.quantile(1e-9)?;
    println!("  quantile(1e-9) = {:.6}, cdf back = {:.3e}", deep, d.cdf(deep));

    // The shortest interval holding 90% of the mass. For a centred
    // forecast both endpoints are interior and the density is equal at
    // the two ends, the defining property of a highest-density interval.
    let iv = d.interval(0.9)?;
    println!(
        "  90% interval [{:.4}, {:.4}], width {:.4}, endpoint densities {:.4} / {:.4}",
        iv.lo,
        iv.hi,
        iv.width(),
        d.pdf(iv.lo),
        d.pdf(iv.hi)
    );

    // Near a support bound the shortest interval pins to it instead of
    // wasting width on an empty tail.
    let slippery = TruncatedNormal::new(0.07, 0.2, 0.0, 1.0)?;
    let pinned = slippery.interval(0.9)?;
    println!(
        "pinned forecast (centre {:.2}, spread {:.2}): 90% interval [{:.4}, {:.4}]",
        slippery.mu(),
        slippery.sigma(),
        pinned.lo,
        pinned.hi
    );

    // Seeded sampling is reproducible; the sample mean sits between the
    // raw centre and 0.5 because truncation pulls mass inward.
    let draws = d.sample(100_000, 7);
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    println!("100k seeded draws: mean {:.4} (centre was {:.2})", mean, d.mu());

    // The negative log-likelihood is exactly -ln pdf; training uses its
    // batch form as the interval-head objective.
    let y = 0.55;
    println!(
        "observation {y}: nll {:.4}, exp(-nll) {:.4} = pdf {:.4}",
        d.nll(y)?,
        (-d.nll(y)?).exp(),
        d.pdf(y)
    );
    Ok(())
}
