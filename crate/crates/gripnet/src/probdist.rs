//! The truncated normal distribution and its forecasting toolkit.
//!
//! A normal distribution with location `mu` and scale `sigma`, truncated to
//! a closed support `[a, b]`:
//!
//! ```text
//! pdf(x) = phi((x - mu)/sigma) / (sigma * Z)       for x in [a, b], else 0
//! Z      = Phi((b - mu)/sigma) - Phi((a - mu)/sigma)
//! ```
//!
//! where `phi`/`Phi` are the standard normal density and CDF. `mu` may lie
//! far outside the support; the mass normaliser `Z` is then the difference
//! of two nearly equal tail probabilities, which cancels catastrophically if
//! computed naively (it underflows to `0 - 0` already at `mu = -0.5`,
//! `sigma = 1e-3` on unit support). The implementation therefore anchors all
//! tail arithmetic at the standardised bound nearer the mode and works with
//! the scaled complement `erfcx`, keeping every quantity finite and
//! relatively accurate for normalisers as small as `exp(-125000)`.
//!
//! Beyond the distribution itself the module provides the pieces the rest
//! of the crate trains and scores with:
//!
//! * [`TruncatedNormal::nll`] and [`batch_loss`]: the negative
//!   log-likelihood used to train the interval head, with analytic
//!   derivatives in [`TruncatedNormal::nll_grad`]. `exp(-nll(x))` equals
//!   `pdf(x)` by construction.
//! * [`TruncatedNormal::interval`]: the highest-density interval, the
//!   shortest subinterval of the support holding a requested mass.
//! * [`TruncatedNormal::crps`]: the continuous ranked probability score by
//!   adaptive quadrature.
//! * [`TruncatedNormal::sample`]: seeded inverse-CDF sampling.

use crate::error::{Error, Result};
use crate::special::{
    erfcx, log_norm_pdf, norm_cdf, norm_hazard, norm_pdf, norm_ppf, norm_sf, FRAC_1_SQRT_2,
    LN_SQRT_2PI,
};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN_2: f64 = std::f64::consts::LN_2;

/// Smallest scale the pipeline feeds into a truncated normal. The
/// training loss clamps predicted scales here before evaluating the
/// likelihood ("thresholded to a minimum value"), and the evaluation and
/// prediction paths apply the same floor so a collapsed scale head cannot
/// produce a degenerate distribution.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// A closed prediction interval, `lo <= hi`, tagged with the probability
/// mass it was built to hold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    /// The mass the interval aims to cover, in `(0, 1)`; 0.9 throughout
    /// the evaluation protocol.
    pub coverage_target: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Whether `x` lies inside the interval, endpoints included.
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

/// Which standardised bound the normaliser arithmetic is anchored at.
///
/// `Central` covers `alpha <= 0 <= beta` (the mode is inside or at the edge
/// of the support), where `Z` is well conditioned as a direct difference.
/// `Lower`/`Upper` cover a mode strictly below/above the support, where both
/// CDF values collapse into the same tail.
#[derive(Debug, Clone, Copy)]
enum Anchor {
    Central {
        /// `Z` itself.
        mass: f64,
    },
    Lower {
        /// `erfcx(alpha / sqrt(2))`.
        cxa: f64,
        /// `Z * 2 * exp(alpha^2 / 2)`, i.e. the normaliser with the
        /// dominant exponential factored out; order unity in practice.
        m: f64,
        /// `(beta - alpha) * (beta + alpha) / 2`, the log-scale gap
        /// between the two tail terms.
        gap: f64,
    },
    Upper {
        /// `erfcx(-beta / sqrt(2))`.
        cxb: f64,
        /// As in `Lower`, anchored at `beta`.
        m: f64,
        /// `(alpha - beta) * (alpha + beta) / 2 >= 0`.
        gap: f64,
    },
}

/// A normal distribution truncated to the closed interval `[a, b]`.
///
/// Construction validates the parameters once; evaluation methods are then
/// infallible unless their own inputs are out of domain.
#[derive(Debug, Clone, Copy)]
pub struct TruncatedNormal {
    mu: f64,
    sigma: f64,
    a: f64,
    b: f64,
    alpha: f64,
    beta: f64,
    log_z: f64,
    anchor: Anchor,
}

impl TruncatedNormal {
    /// Builds the distribution, caching the standardised bounds and the
    /// stabilised normaliser.
    ///
    /// Fails if any parameter is non-finite, if `sigma <= 0`, or if
    /// `a >= b`.
    pub fn new(mu: f64, sigma: f64, a: f64, b: f64) -> Result<Self> {
        for (name, v) in [("mu", mu), ("sigma", sigma), ("a", a), ("b", b)] {
            if !v.is_finite() {
                return Err(Error::numeric(format!(
                    "truncated normal parameter {name} = {v} is not finite"
                )));
            }
        }
        if sigma <= 0.0 {
            return Err(Error::numeric(format!(
                "truncated normal sigma = {sigma}: scale must be positive"
            )));
        }
        if a >= b {
            return Err(Error::numeric(format!(
                "truncated normal support [{a}, {b}] is empty: require a < b"
            )));
        }
        let alpha = (a - mu) / sigma;
        let beta = (b - mu) / sigma;
        let (anchor, log_z) = if alpha > 0.0 {
            let cxa = erfcx(alpha * FRAC_1_SQRT_2);
            let gap = (beta - alpha) * (beta + alpha) * 0.5;
            let m = cxa - erfcx(beta * FRAC_1_SQRT_2) * (-gap).exp();
            (
                Anchor::Lower { cxa, m, gap },
                -0.5 * alpha * alpha + m.ln() - LN_2,
            )
        } else if beta < 0.0 {
            let cxb = erfcx(-beta * FRAC_1_SQRT_2);
            let gap = (alpha - beta) * (alpha + beta) * 0.5;
            let m = cxb - erfcx(-alpha * FRAC_1_SQRT_2) * (-gap).exp();
            (
                Anchor::Upper { cxb, m, gap },
                -0.5 * beta * beta + m.ln() - LN_2,
            )
        } else {
            // The subtraction is benign here: as sigma grows, numerator and
            // difference shrink together, so the relative error stays
            // bounded by ~|beta| / (beta - alpha) ulps.
            let mass = norm_cdf(beta) - norm_cdf(alpha);
            // log Z through the complementary tails: Z is often within an
            // ulp of 1 in this case, where ln(mass) would lose all relative
            // accuracy; ln_1p of the (cancellation-free) tail sum keeps it.
            let log_z = (-(norm_sf(beta) + norm_cdf(alpha))).ln_1p();
            (Anchor::Central { mass }, log_z)
        };
        if !log_z.is_finite() {
            return Err(Error::numeric(format!(
                "truncated normal (mu={mu}, sigma={sigma}, [{a}, {b}]): normaliser underflowed"
            )));
        }
        Ok(TruncatedNormal {
            mu,
            sigma,
            a,
            b,
            alpha,
            beta,
            log_z,
            anchor,
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// The support `(a, b)`.
    pub fn support(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    /// Natural log of the mass normaliser `Z`; finite even when `Z`
    /// underflows as an `f64`.
    pub fn log_normaliser(&self) -> f64 {
        self.log_z
    }

    /// Probability density at `x`; zero outside the closed support.
    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.a || x > self.b {
            return 0.0;
        }
        self.log_pdf(x).exp()
    }

    /// Log-density at `x`; `-inf` outside the closed support.
    pub fn log_pdf(&self, x: f64) -> f64 {
        if x < self.a || x > self.b || x.is_nan() {
            return f64::NEG_INFINITY;
        }
        let z = (x - self.mu) / self.sigma;
        match self.anchor {
            Anchor::Central { .. } => log_norm_pdf(z) - self.sigma.ln() - self.log_z,
            Anchor::Lower { m, .. } => {
                // Exponents are taken relative to alpha so the large
                // -z^2/2 and -log Z terms cancel analytically instead of
                // numerically: z - alpha = (x - a)/sigma.
                let d = (x - self.a) / self.sigma;
                -d * (z + self.alpha) * 0.5 - LN_SQRT_2PI - self.sigma.ln() - m.ln() + LN_2
            }
            Anchor::Upper { m, .. } => {
                let d = (x - self.b) / self.sigma;
                -d * (z + self.beta) * 0.5 - LN_SQRT_2PI - self.sigma.ln() - m.ln() + LN_2
            }
        }
    }

    /// Distribution function `P(X <= x)`, clamped to `[0, 1]`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        if x <= self.a {
            return 0.0;
        }
        if x >= self.b {
            return 1.0;
        }
        let z = (x - self.mu) / self.sigma;
        let raw = match self.anchor {
            Anchor::Central { mass } => (norm_cdf(z) - norm_cdf(self.alpha)) / mass,
            Anchor::Lower { cxa, m, .. } => {
                let d = (x - self.a) / self.sigma;
                (cxa - erfcx(z * FRAC_1_SQRT_2) * (-d * (z + self.alpha) * 0.5).exp()) / m
            }
            Anchor::Upper { cxb, m, .. } => {
                let d = (x - self.b) / self.sigma;
                let sf = (cxb - erfcx(-z * FRAC_1_SQRT_2) * (-d * (z + self.beta) * 0.5).exp()) / m;
                1.0 - sf
            }
        };
        raw.clamp(0.0, 1.0)
    }

    /// Quantile function: the `x` with `cdf(x) = p`.
    ///
    /// Exact at the endpoints (`quantile(0) = a`, `quantile(1) = b`); errors
    /// if `p` is outside `[0, 1]` or not finite.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::numeric(format!(
                "quantile probability p = {p} outside [0, 1]"
            )));
        }
        if p == 0.0 {
            return Ok(self.a);
        }
        if p == 1.0 {
            return Ok(self.b);
        }
        let z = match self.anchor {
            Anchor::Central { .. } => {
                // Convex combinations of the endpoint CDF values: positive
                // weights, so no cancellation on either side.
                let t = (1.0 - p) * norm_cdf(self.alpha) + p * norm_cdf(self.beta);
                if t <= 0.5 {
                    solve_norm_cdf(t, self.alpha, self.beta)
                } else {
                    let s = (1.0 - p) * norm_sf(self.alpha) + p * norm_sf(self.beta);
                    -solve_norm_cdf(s, -self.beta, -self.alpha)
                }
            }
            Anchor::Lower { cxa, m, .. } => {
                solve_anchored_tail(self.alpha, cxa, m, p, self.beta)
            }
            Anchor::Upper { cxb, m, .. } => {
                -solve_anchored_tail(-self.beta, cxb, m, 1.0 - p, -self.alpha)
            }
        };
        Ok((self.mu + self.sigma * z).clamp(self.a, self.b))
    }

    /// Draws `n` samples by applying the quantile function to a seeded
    /// uniform stream (ChaCha8, 53-bit mantissa draws). The same seed
    /// always yields the same sequence.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                // u is in [0, 1), inside the quantile domain.
                self.quantile(u).expect("uniform draw within [0, 1)")
            })
            .collect()
    }

    /// Negative log-likelihood of an observation:
    ///
    /// ```text
    /// nll(x) = ln sigma + (mu - x)^2 / (2 sigma^2) + ln Z + ln(2 pi)/2
    /// ```
    ///
    /// which is exactly `-ln pdf(x)`, so `exp(-nll(x)) == pdf(x)`. Returns
    /// `+inf` for `x` outside the support and an error for non-finite `x`.
    pub fn nll(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::numeric(format!(
                "nll observation x = {x} is not finite"
            )));
        }
        Ok(-self.log_pdf(x))
    }

    /// Analytic partial derivatives of [`TruncatedNormal::nll`] with
    /// respect to `mu` and `sigma`, in that order.
    ///
    /// With `r_a = phi(alpha)/Z` and `r_b = phi(beta)/Z`:
    ///
    /// ```text
    /// d nll / d mu    = (mu - x)/sigma^2 + (r_a - r_b)/sigma
    /// d nll / d sigma = 1/sigma - (x - mu)^2/sigma^3
    ///                   + (alpha * r_a - beta * r_b)/sigma
    /// ```
    pub fn nll_grad(&self, x: f64) -> Result<(f64, f64)> {
        if !x.is_finite() {
            return Err(Error::numeric(format!(
                "nll observation x = {x} is not finite"
            )));
        }
        let (r_a, r_b) = self.tail_density_ratios();
        let s = self.sigma;
        let d_mu = (self.mu - x) / (s * s) + (r_a - r_b) / s;
        let d_sigma =
            1.0 / s - (x - self.mu).powi(2) / (s * s * s) + (self.alpha * r_a - self.beta * r_b) / s;
        Ok((d_mu, d_sigma))
    }

    /// `(phi(alpha)/Z, phi(beta)/Z)`, each computed in the coordinate frame
    /// of the anchor so the large exponents cancel analytically.
    fn tail_density_ratios(&self) -> (f64, f64) {
        match self.anchor {
            Anchor::Central { mass } => (norm_pdf(self.alpha) / mass, norm_pdf(self.beta) / mass),
            Anchor::Lower { m, gap, .. } => {
                let r_a = (LN_2 - LN_SQRT_2PI - m.ln()).exp();
                (r_a, r_a * (-gap).exp())
            }
            Anchor::Upper { m, gap, .. } => {
                let r_b = (LN_2 - LN_SQRT_2PI - m.ln()).exp();
                (r_b * (-gap).exp(), r_b)
            }
        }
    }

    /// Highest-density interval: the shortest closed subinterval of the
    /// support with probability mass `coverage`.
    ///
    /// For a unimodal density this is either an interior interval whose
    /// endpoint densities are equal, or an interval pinned at the support
    /// bound nearer the mode. Near-flat densities degenerate gracefully to
    /// the central interval, which is the equal-density solution there.
    pub fn interval(&self, coverage: f64) -> Result<Interval> {
        if !coverage.is_finite() || coverage <= 0.0 || coverage >= 1.0 {
            return Err(Error::numeric(format!(
                "interval coverage = {coverage} outside (0, 1)"
            )));
        }
        // Mode at or beyond a bound: the density is monotone on the
        // support, so the interval pins to that bound.
        if self.mu <= self.a {
            return Ok(Interval {
                lo: self.a,
                hi: self.quantile(coverage)?,
                coverage_target: coverage,
            });
        }
        if self.mu >= self.b {
            return Ok(Interval {
                lo: self.quantile(1.0 - coverage)?,
                hi: self.b,
                coverage_target: coverage,
            });
        }

        // Interior mode. Let hi(lo) be the right endpoint holding the mass
        // fixed; g(lo) = log f(lo) - log f(hi(lo)) is strictly increasing
        // on [a, min(mode, quantile(1 - coverage))], so the equal-density
        // root (if any) is found by bisection, and a sign at either end
        // means the optimum is pinned.
        let upper = |lo: f64| -> Result<f64> {
            let mass = (self.cdf(lo) + coverage).clamp(0.0, 1.0);
            self.quantile(mass)
        };
        let g = |lo: f64| -> Result<f64> { Ok(self.log_pdf(lo) - self.log_pdf(upper(lo)?)) };

        let lo_cap = self.quantile(1.0 - coverage)?.min(self.mu);
        if g(self.a)? >= 0.0 {
            return Ok(Interval {
                lo: self.a,
                hi: self.quantile(coverage)?,
                coverage_target: coverage,
            });
        }
        if g(lo_cap)? <= 0.0 {
            return Ok(Interval {
                lo: self.quantile(1.0 - coverage)?,
                hi: self.b,
                coverage_target: coverage,
            });
        }
        let (mut left, mut right) = (self.a, lo_cap);
        for _ in 0..200 {
            if right - left <= 1e-15 * left.abs().max(1.0) {
                break;
            }
            let mid = 0.5 * (left + right);
            if g(mid)? < 0.0 {
                left = mid;
            } else {
                right = mid;
            }
        }
        let lo = 0.5 * (left + right);
        Ok(Interval {
            lo,
            hi: upper(lo)?,
            coverage_target: coverage,
        })
    }

    /// Continuous ranked probability score of this forecast against the
    /// outcome `x`:
    ///
    /// ```text
    /// crps = integral over y of (cdf(y) - step(y - x))^2 dy
    /// ```
    ///
    /// evaluated by adaptive Simpson quadrature with an overall target
    /// tolerance of 1e-9. The integrand is split at `x` (removing its only
    /// discontinuity) and seeded with knots around the mode and, for a mode
    /// outside the support, at multiples of the boundary e-folding length,
    /// so spike-narrow densities are resolved.
    pub fn crps(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::numeric(format!(
                "crps observation x = {x} is not finite"
            )));
        }
        // Outside the support the CDF is constant 0 or 1, so those pieces
        // integrate exactly.
        let mut total = 0.0;
        if x < self.a {
            total += self.a - x;
        }
        if x > self.b {
            total += x - self.b;
        }
        let split = x.clamp(self.a, self.b);

        let mut knots: Vec<f64> = vec![self.a, self.b, split];
        for k in [-8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0] {
            knots.push((self.mu + k * self.sigma).clamp(self.a, self.b));
        }
        // E-folding knots against the nearer bound when the mode is
        // outside: there the density decays like exp(-(y - bound)/ell).
        if self.mu < self.a {
            let ell = self.sigma * self.sigma / (self.a - self.mu);
            for j in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
                knots.push((self.a + j * ell).clamp(self.a, self.b));
            }
        }
        if self.mu > self.b {
            let ell = self.sigma * self.sigma / (self.mu - self.b);
            for j in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
                knots.push((self.b - j * ell).clamp(self.a, self.b));
            }
        }
        knots.sort_by(|p, q| p.partial_cmp(q).expect("finite knots"));
        knots.dedup();

        for w in knots.windows(2) {
            let (u, v) = (w[0], w[1]);
            if v <= u {
                continue;
            }
            if v <= split {
                total += adaptive_simpson(&|y| self.cdf(y).powi(2), u, v, 1e-10, 48);
            } else {
                total += adaptive_simpson(&|y| (1.0 - self.cdf(y)).powi(2), u, v, 1e-10, 48);
            }
        }
        Ok(total)
    }
}

/// Sum of truncated-normal negative log-likelihoods over a batch: the
/// interval-head training loss. Point estimates become the locations and
/// the predicted scales the sigmas, each paired with its label on the
/// common support `[a, b]`.
///
/// The slices must have equal nonzero length. Scales must already be
/// floored by the caller (the training loop clamps at its documented
/// minimum before calling); `sigma <= 0` is an error here.
pub fn batch_loss(points: &[f64], sigmas: &[f64], labels: &[f64], a: f64, b: f64) -> Result<f64> {
    if points.len() != sigmas.len() || points.len() != labels.len() {
        return Err(Error::shape(format!(
            "batch_loss lengths differ: points {}, sigmas {}, labels {}",
            points.len(),
            sigmas.len(),
            labels.len()
        )));
    }
    if points.is_empty() {
        return Err(Error::numeric("batch_loss over an empty batch"));
    }
    let mut total = 0.0;
    for i in 0..points.len() {
        let d = TruncatedNormal::new(points[i], sigmas[i], a, b)
            .map_err(|e| Error::numeric(format!("batch_loss sample {i}: {e}")))?;
        total += d.nll(labels[i])?;
    }
    if !total.is_finite() {
        return Err(Error::numeric(format!(
            "batch_loss is not finite ({total}); a label may lie outside [{a}, {b}]"
        )));
    }
    Ok(total)
}

/// Solves `Phi(z) = t` for small-to-moderate `t`, bracketed by the
/// standardised support. Newton from the rational initial guess; the
/// bracket is only consulted if a step misbehaves.
fn solve_norm_cdf(t: f64, lo: f64, hi: f64) -> f64 {
    let mut z = norm_ppf(t);
    if !z.is_finite() {
        z = if t < 0.5 { lo } else { hi };
    }
    for _ in 0..4 {
        let step = (norm_cdf(z) - t) / norm_pdf(z);
        if !step.is_finite() {
            break;
        }
        z -= step;
        if step.abs() <= 1e-14 * (1.0 + z.abs()) {
            break;
        }
    }
    z.clamp(lo, hi)
}

/// Solves the anchored lower-tail quantile: given a support whose
/// standardised bounds are `0 < alpha < beta`, finds `z` with
/// `sf(z) = sf(alpha) - p * Z`, entirely in log space.
///
/// `cx` is `erfcx(alpha/sqrt(2))` and `m` the anchored normaliser, so the
/// target is `log sf(z) = -alpha^2/2 - ln 2 + ln(cx - p*m)`.
fn solve_anchored_tail(alpha: f64, cx: f64, m: f64, p: f64, beta: f64) -> f64 {
    let inner = (cx - p * m).max(f64::MIN_POSITIVE);
    let target = -0.5 * alpha * alpha - LN_2 + inner.ln();
    let mut z = alpha;
    for _ in 0..80 {
        let resid = log_norm_sf_anchored(z) - target;
        let step = resid / norm_hazard(z);
        z += step;
        if !z.is_finite() {
            return beta;
        }
        if step.abs() <= 1e-14 * (1.0 + z.abs()) {
            break;
        }
    }
    z.clamp(alpha, beta)
}

/// `ln sf(z)` for `z >= 0`, shared with the anchored solver.
fn log_norm_sf_anchored(z: f64) -> f64 {
    erfcx(z * FRAC_1_SQRT_2).ln() - 0.5 * z * z - LN_2
}

/// Classic recursive adaptive Simpson with Richardson-style acceptance.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tn(mu: f64, sigma: f64) -> TruncatedNormal {
        TruncatedNormal::new(mu, sigma, 0.0, 1.0).expect("valid test distribution")
    }

    fn assert_rel(got: f64, want: f64, tol: f64, what: &str) {
        let denom = want.abs().max(1e-300);
        assert!(
            ((got - want) / denom).abs() <= tol,
            "{what}: got {got:.17e}, want {want:.17e}, rel {:.2e}",
            ((got - want) / denom).abs()
        );
    }

    /// The standard parameter grid exercised throughout: modes inside,
    /// at the edge of, and far outside the unit support; scales from
    /// spike-narrow to near-uniform.
    const MU_GRID: [f64; 5] = [-0.5, 0.0, 0.25, 0.5, 1.5];
    const SIGMA_GRID: [f64; 4] = [1e-3, 0.05, 0.3, 10.0];

    /// Test-local quadrature oracle, independent of the product CRPS
    /// integrator: plain recursive Simpson over hand-placed knots.
    fn integrate_pdf(d: &TruncatedNormal) -> f64 {
        let (a, b) = d.support();
        let mut knots = vec![a, b];
        for k in [-8.0, -4.0, -2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            knots.push((d.mu() + k * d.sigma()).clamp(a, b));
        }
        if d.mu() < a {
            let ell = d.sigma() * d.sigma() / (a - d.mu());
            for j in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
                knots.push((a + j * ell).clamp(a, b));
            }
        }
        if d.mu() > b {
            let ell = d.sigma() * d.sigma() / (d.mu() - b);
            for j in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
                knots.push((b - j * ell).clamp(a, b));
            }
        }
        knots.sort_by(|p, q| p.partial_cmp(q).unwrap());
        knots.dedup();
        let mut total = 0.0;
        for w in knots.windows(2) {
            if w[1] > w[0] {
                total += adaptive_simpson(&|x| d.pdf(x), w[0], w[1], 1e-13, 48);
            }
        }
        total
    }

    #[test]
    fn pdf_integrates_to_one_across_the_parameter_grid() {
        for mu in MU_GRID {
            for sigma in SIGMA_GRID {
                let d = tn(mu, sigma);
                let mass = integrate_pdf(&d);
                assert!(
                    (mass - 1.0).abs() <= 1e-8,
                    "pdf mass for mu={mu}, sigma={sigma}: {mass}"
                );
            }
        }
    }

    // Normaliser references frozen from a 50-digit evaluation.
    #[test]
    fn log_normaliser_matches_the_frozen_references() {
        let refs: &[(f64, f64, f64)] = &[
            (-0.5, 1e-3, -125_007.133_550_631_586_87),
            (-0.5, 0.05, -53.231_285_150_512_47),
            (-0.5, 0.3, -3.040_937_493_276_402_2),
            (-0.5, 10.0, -3.226_936_058_151_978_6),
            (0.0, 1e-3, -0.693_147_180_559_945_3),
            (0.0, 0.05, -0.693_147_180_559_945_3),
            (0.0, 0.3, -0.694_005_669_622_645_4),
            (0.0, 10.0, -3.223_189_182_107_183_8),
            (0.25, 1e-3, 0.0),
            (0.25, 0.05, -2.866_516_129_637_636e-7),
            (0.25, 0.3, -0.233_873_469_406_950_46),
            (0.25, 10.0, -3.222_252_463_096_595),
            (0.5, 1e-3, 0.0),
            (0.5, 0.05, -1.523_970_604_832_105_2e-23),
            (0.5, 0.3, -0.100_462_203_717_045_85),
            (0.5, 10.0, -3.221_940_223_426_452_8),
            (1.5, 1e-3, -125_007.133_550_631_586_87),
            (1.5, 0.05, -53.231_285_150_512_47),
            (1.5, 0.3, -3.040_937_493_276_402_2),
            (1.5, 10.0, -3.226_936_058_151_978_6),
        ];
        for &(mu, sigma, want) in refs {
            let got = tn(mu, sigma).log_normaliser();
            if want == 0.0 {
                assert!(got.abs() < 1e-15, "lnZ(mu={mu}, sigma={sigma}) = {got}");
            } else {
                assert_rel(got, want, 1e-11, &format!("lnZ(mu={mu}, sigma={sigma})"));
            }
        }
    }

    #[test]
    fn reference_distribution_matches_frozen_pdf_and_cdf_values() {
        let d = tn(0.3, 0.2);
        let cases: &[(f64, f64, f64)] = &[
            // x, pdf, cdf
            (0.0, 0.694_121_785_039_268_2, 0.0),
            (0.1, 1.296_790_218_865_251, 0.098_447_989_153_543_83),
            (0.3, 2.138_045_617_479_013_9, 0.464_320_785_412_174_84),
            (0.55, 0.978_868_612_671_483_8, 0.887_007_883_062_007_9),
            (0.9, 0.023_751_541_363_178_5, 0.998_802_447_318_826_9),
            (1.0, 4.676_955_798_505_185e-3, 1.0),
        ];
        for &(x, pdf, cdf) in cases {
            assert_rel(d.pdf(x), pdf, 1e-12, &format!("pdf({x})"));
            if cdf == 0.0 || cdf == 1.0 {
                assert_eq!(d.cdf(x), cdf, "cdf({x})");
            } else {
                assert_rel(d.cdf(x), cdf, 1e-12, &format!("cdf({x})"));
            }
        }
    }

    #[test]
    fn reference_distribution_matches_frozen_quantiles() {
        let d = tn(0.3, 0.2);
        let cases: &[(f64, f64)] = &[
            (0.05, 0.058_328_832_694_383_66),
            (0.5, 0.316_707_181_321_419_17),
            (0.9, 0.563_866_909_999_240_2),
        ];
        for &(p, want) in cases {
            assert_rel(d.quantile(p).unwrap(), want, 1e-12, &format!("quantile({p})"));
        }
        assert_eq!(d.quantile(0.0).unwrap(), 0.0);
        assert_eq!(d.quantile(1.0).unwrap(), 1.0);
    }

    #[test]
    fn nll_and_gradients_match_the_frozen_references() {
        let d = tn(0.3, 0.2);
        assert_rel(d.nll(0.7).unwrap(), 1.240_107_851_105_115_8, 1e-12, "nll");
        let (dmu, dsigma) = d.nll_grad(0.7).unwrap();
        assert_rel(dmu, -9.310_555_170_759_237, 1e-12, "dnll/dmu");
        assert_rel(dsigma, -16.057_552_022_853_67, 1e-12, "dnll/dsigma");
    }

    #[test]
    fn nll_gradients_match_central_finite_differences_on_random_parameters() {
        // 100 deterministic pseudo-random (mu, sigma, x) triples; step 1e-5
        // central differences in f64.
        let mut state = 0x9e37_79b9_7f4a_7c15_u64;
        let mut next = move || {
            state = state.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1);
            ((state >> 11) as f64) / (1u64 << 53) as f64
        };
        for i in 0..100 {
            let mu = -0.3 + 1.6 * next();
            let sigma = 0.01 + 0.6 * next();
            let x = 0.01 + 0.98 * next();
            let d = tn(mu, sigma);
            let (g_mu, g_sigma) = d.nll_grad(x).unwrap();
            let h = 1e-5;
            let fd_mu = (tn(mu + h, sigma).nll(x).unwrap() - tn(mu - h, sigma).nll(x).unwrap())
                / (2.0 * h);
            let fd_sigma = (tn(mu, sigma + h).nll(x).unwrap()
                - tn(mu, sigma - h).nll(x).unwrap())
                / (2.0 * h);
            let rel = |got: f64, fd: f64| (got - fd).abs() / fd.abs().max(1e-3);
            assert!(
                rel(g_mu, fd_mu) <= 1e-5,
                "case {i}: dmu {g_mu} vs fd {fd_mu} (mu={mu}, sigma={sigma}, x={x})"
            );
            assert!(
                rel(g_sigma, fd_sigma) <= 1e-5,
                "case {i}: dsigma {g_sigma} vs fd {fd_sigma} (mu={mu}, sigma={sigma}, x={x})"
            );
        }
    }

    #[test]
    fn exp_of_negative_nll_reproduces_the_density_across_the_grid() {
        for mu in MU_GRID {
            for sigma in SIGMA_GRID {
                let d = tn(mu, sigma);
                for x in [0.015, 0.35, 0.82] {
                    let via_nll = (-d.nll(x).unwrap()).exp();
                    let pdf = d.pdf(x);
                    if pdf == 0.0 {
                        assert_eq!(via_nll, 0.0);
                    } else {
                        assert_rel(via_nll, pdf, 1e-10, &format!("exp(-nll) mu={mu} s={sigma} x={x}"));
                    }
                }
            }
        }
    }

    #[test]
    fn quantile_inverts_cdf_on_the_grid_where_mass_is_representable() {
        for mu in MU_GRID {
            for sigma in SIGMA_GRID {
                let d = tn(mu, sigma);
                // CDF direction: always well posed.
                let mut p = 1e-6;
                while p < 1.0 {
                    let x = d.quantile(p).unwrap();
                    assert!(
                        (d.cdf(x) - p).abs() <= 1e-10,
                        "cdf(quantile({p})) for mu={mu}, sigma={sigma}: {}",
                        d.cdf(x)
                    );
                    p += 0.007;
                }
                // x direction, restricted to points whose CDF is not
                // saturated in f64 (beyond that, the roundtrip target is
                // not representable).
                for x in [0.05, 0.2, 0.5, 0.8, 0.95] {
                    let f = d.cdf(x);
                    if f > 1e-12 && f < 1.0 - 1e-12 {
                        let back = d.quantile(f).unwrap();
                        assert!(
                            (back - x).abs() <= 1e-9,
                            "quantile(cdf({x})) for mu={mu}, sigma={sigma}: {back}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn extreme_lower_tail_distribution_matches_frozen_references() {
        // Mode 500 standard deviations below the support: the normaliser
        // is exp(-125007) and the density an exponential spike at a.
        let d = tn(-0.5, 1e-3);
        assert_rel(d.log_normaliser(), -125_007.133_550_631_586_87, 1e-11, "lnZ");
        assert_rel(d.pdf(1e-6), 303_266.391_274_698_3, 1e-9, "pdf(1e-6)");
        assert_rel(d.pdf(5e-6), 41_042.150_450_546_25, 1e-9, "pdf(5e-6)");
        assert_rel(d.cdf(2e-6), 0.632_122_766_083_868_1, 1e-10, "cdf(2e-6)");
        assert_rel(
            d.quantile(0.9).unwrap(),
            4.605_130_558_470_584_5e-6,
            1e-9,
            "quantile(0.9)",
        );
        assert_rel(d.nll(3e-6).unwrap(), -11.622_362_877_364_33, 1e-10, "nll(3e-6)");
    }

    #[test]
    fn extreme_upper_tail_distribution_matches_frozen_references() {
        let d = tn(1.5, 0.05);
        assert_rel(d.log_normaliser(), -53.231_285_150_512_47, 1e-12, "lnZ");
        assert_rel(
            d.quantile(0.5).unwrap(),
            0.996_579_408_195_928_5,
            1e-10,
            "median",
        );
        assert_rel(d.cdf(0.95), 2.507_475_627_732_559_5e-5, 1e-9, "cdf(0.95)");
    }

    #[test]
    fn near_uniform_distribution_behaves_like_uniform() {
        let d = tn(0.5, 100.0);
        assert_rel(d.pdf(0.25), 1.000_001_041_660_264_8, 1e-10, "pdf(0.25)");
        assert!((d.pdf(0.25) - 1.0).abs() <= 1e-3, "documented 1e-3 check");
        let nll = d.nll(0.25).unwrap();
        assert_rel(nll, -1.041_659_722_227_733_7e-6, 1e-6, "nll(0.25)");
        assert!(nll.abs() <= 1e-3, "documented 1e-3 check");
    }

    #[test]
    fn hdi_matches_the_frozen_references() {
        let cases: &[(f64, f64, f64, f64, f64)] = &[
            // mu, sigma, coverage, lo, hi
            (0.5, 0.15, 0.9, 0.253_831_855_967_941_58, 0.746_168_144_032_058_4),
            (0.05, 0.1, 0.9, 0.0, 0.198_217_967_844_090_7),
            (0.3, 0.2, 0.5, 0.175_471_633_602_061_75, 0.424_528_366_397_938_25),
            (0.95, 0.2, 0.9, 0.638_829_437_092_430_7, 1.0),
            (-0.5, 1e-3, 0.9, 0.0, 4.605_130_558_470_584_5e-6),
            (0.5, 100.0, 0.9, 0.050_000_356_251_189, 0.949_999_643_748_811),
        ];
        for &(mu, sigma, c, lo, hi) in cases {
            let d = tn(mu, sigma);
            let iv = d.interval(c).unwrap();
            assert!(
                (iv.lo - lo).abs() <= 1e-7 && (iv.hi - hi).abs() <= 1e-7,
                "hdi(mu={mu}, sigma={sigma}, c={c}): got [{}, {}], want [{lo}, {hi}]",
                iv.lo,
                iv.hi
            );
            // Mass is exact by construction of the right endpoint.
            let mass = d.cdf(iv.hi) - d.cdf(iv.lo);
            assert!((mass - c).abs() <= 1e-8, "mass {mass} for coverage {c}");
        }
    }

    #[test]
    fn interior_hdi_has_equal_endpoint_densities() {
        for (mu, sigma, c) in [(0.5, 0.15, 0.9), (0.3, 0.2, 0.5), (0.62, 0.21, 0.8)] {
            let d = tn(mu, sigma);
            let iv = d.interval(c).unwrap();
            let (fl, fh) = (d.pdf(iv.lo), d.pdf(iv.hi));
            assert!(
                ((fl - fh) / fl.max(fh)).abs() <= 1e-6,
                "endpoint densities {fl} vs {fh} for mu={mu}, sigma={sigma}, c={c}"
            );
        }
    }

    /// Dense grid-search oracle for the HDI: try every left endpoint on a
    /// fine grid and keep the narrowest interval. Slow but assumption-free.
    fn hdi_grid_oracle(d: &TruncatedNormal, coverage: f64, grid: usize) -> (f64, f64) {
        let (a, _) = d.support();
        let lo_max = d.quantile(1.0 - coverage).unwrap();
        let mut best = (a, d.quantile(coverage).unwrap());
        let mut best_w = best.1 - best.0;
        for i in 0..=grid {
            let lo = a + (lo_max - a) * i as f64 / grid as f64;
            let hi = d.quantile((d.cdf(lo) + coverage).clamp(0.0, 1.0)).unwrap();
            if hi - lo < best_w {
                best_w = hi - lo;
                best = (lo, hi);
            }
        }
        best
    }

    #[test]
    fn hdi_width_matches_the_grid_search_oracle() {
        for (mu, sigma, c) in [(0.5, 0.15, 0.9), (0.05, 0.1, 0.9), (0.95, 0.2, 0.9), (0.3, 0.2, 0.5)] {
            let d = tn(mu, sigma);
            let iv = d.interval(c).unwrap();
            let (glo, ghi) = hdi_grid_oracle(&d, c, 20_000);
            assert!(
                ((iv.hi - iv.lo) - (ghi - glo)).abs() <= 1e-4,
                "width mismatch for mu={mu}, sigma={sigma}, c={c}: {} vs oracle {}",
                iv.hi - iv.lo,
                ghi - glo
            );
        }
    }

    #[test]
    fn crps_matches_the_frozen_references() {
        let cases: &[(f64, f64, f64, f64)] = &[
            (0.4, 0.1, 0.35, 0.033_141_199_758_089_7),
            (0.5, 100.0, 0.5, 0.083_333_090_278_211_81),
            (0.2, 1e-4, 0.35, 0.149_943_581_041_645_22),
            (0.7, 0.25, 0.1, 0.431_988_514_487_489),
            (0.3, 0.2, 0.7, 0.276_399_900_781_264),
            (0.5, 0.15, 1.3, 0.715_689_419_667_703_1),
        ];
        for &(mu, sigma, x, want) in cases {
            let got = tn(mu, sigma).crps(x).unwrap();
            assert_rel(got, want, 1e-7, &format!("crps(mu={mu}, sigma={sigma}, x={x})"));
        }
    }

    #[test]
    fn crps_near_uniform_near_half_is_one_twelfth() {
        let got = tn(0.5, 100.0).crps(0.5).unwrap();
        assert!((got - 1.0 / 12.0).abs() <= 1e-4, "got {got}");
    }

    #[test]
    fn crps_of_a_spike_forecast_approaches_absolute_error() {
        let got = tn(0.2, 1e-4).crps(0.35).unwrap();
        assert!((got - 0.15).abs() <= 1e-3, "got {got}");
    }

    #[test]
    fn crps_agrees_with_a_monte_carlo_oracle() {
        // crps = E|Y - x| - E|Y - Y'|/2 with Y, Y' independent draws.
        let d = tn(0.35, 0.18);
        let x = 0.6;
        let n = 200_000;
        let ys = d.sample(2 * n, 77);
        let (mut term1, mut term2) = (0.0, 0.0);
        for i in 0..n {
            term1 += (ys[2 * i] - x).abs() + (ys[2 * i + 1] - x).abs();
            term2 += (ys[2 * i] - ys[2 * i + 1]).abs();
        }
        let mc = term1 / (2.0 * n as f64) - term2 / (2.0 * n as f64);
        let got = d.crps(x).unwrap();
        assert!((got - mc).abs() <= 2e-3, "quadrature {got} vs MC {mc}");
    }

    #[test]
    fn sampling_is_deterministic_and_matches_the_quadrature_mean() {
        let d = tn(0.3, 0.2);
        let s1 = d.sample(1000, 42);
        let s2 = d.sample(1000, 42);
        assert_eq!(s1, s2, "same seed must reproduce the same draws");
        let s3 = d.sample(1000, 43);
        assert_ne!(s1, s3, "different seeds should differ");

        let n = 1_000_000;
        let draws = d.sample(n, 7);
        let mean: f64 = draws.iter().sum::<f64>() / n as f64;
        // Frozen quadrature mean 0.32757779...; sd of the distribution is
        // below 0.2, so 3 standard errors is under 6e-4.
        let want = 0.327_577_793_169_630_5;
        let var: f64 =
            draws.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - want).abs() <= 3.0 * se,
            "sample mean {mean} vs quadrature mean {want} (3se = {})",
            3.0 * se
        );
        for y in draws.iter().take(1000) {
            assert!((0.0..=1.0).contains(y));
        }
    }

    #[test]
    fn sample_zero_is_empty_and_samples_respect_support() {
        let d = tn(0.9, 0.4);
        assert!(d.sample(0, 1).is_empty());
        assert!(d.sample(500, 9).iter().all(|y| (0.0..=1.0).contains(y)));
    }

    #[test]
    fn batch_loss_is_the_sum_of_individual_nlls() {
        let points = [0.3, 0.5, 0.72];
        let sigmas = [0.2, 0.1, 0.35];
        let labels = [0.25, 0.55, 0.6];
        let total = batch_loss(&points, &sigmas, &labels, 0.0, 1.0).unwrap();
        let manual: f64 = (0..3)
            .map(|i| tn(points[i], sigmas[i]).nll(labels[i]).unwrap())
            .sum();
        assert_rel(total, manual, 1e-14, "batch_loss");
    }

    #[test]
    fn batch_loss_rejects_mismatched_lengths_and_bad_scales() {
        assert!(batch_loss(&[0.3], &[0.1, 0.2], &[0.4], 0.0, 1.0).is_err());
        assert!(batch_loss(&[], &[], &[], 0.0, 1.0).is_err());
        assert!(batch_loss(&[0.3], &[0.0], &[0.4], 0.0, 1.0).is_err());
        assert!(batch_loss(&[0.3], &[-0.1], &[0.4], 0.0, 1.0).is_err());
    }

    #[test]
    fn construction_rejects_invalid_parameters() {
        assert!(TruncatedNormal::new(f64::NAN, 0.1, 0.0, 1.0).is_err());
        assert!(TruncatedNormal::new(0.5, 0.0, 0.0, 1.0).is_err());
        assert!(TruncatedNormal::new(0.5, -1.0, 0.0, 1.0).is_err());
        assert!(TruncatedNormal::new(0.5, 0.1, 1.0, 1.0).is_err());
        assert!(TruncatedNormal::new(0.5, 0.1, 1.0, 0.0).is_err());
        assert!(TruncatedNormal::new(0.5, f64::INFINITY, 0.0, 1.0).is_err());
    }

    #[test]
    fn density_is_zero_and_log_density_neg_infinite_outside_the_support() {
        let d = tn(0.4, 0.2);
        assert_eq!(d.pdf(-0.01), 0.0);
        assert_eq!(d.pdf(1.01), 0.0);
        assert_eq!(d.log_pdf(-0.01), f64::NEG_INFINITY);
        assert_eq!(d.nll(1.5).unwrap(), f64::INFINITY);
        assert!(d.nll(f64::NAN).is_err());
        assert!(d.crps(f64::INFINITY).is_err());
        assert!(d.quantile(1.2).is_err());
        assert!(d.interval(0.0).is_err());
        assert!(d.interval(1.0).is_err());
    }

    #[test]
    fn cdf_saturates_at_the_support_bounds() {
        let d = tn(0.4, 0.2);
        assert_eq!(d.cdf(-5.0), 0.0);
        assert_eq!(d.cdf(0.0), 0.0);
        assert_eq!(d.cdf(1.0), 1.0);
        assert_eq!(d.cdf(7.0), 1.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn arb_params() -> impl Strategy<Value = (f64, f64)> {
            (-2.0..3.0_f64, 1e-3..20.0_f64)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn cdf_is_monotone_and_bounded((mu, sigma) in arb_params(), x1 in 0.0..1.0_f64, x2 in 0.0..1.0_f64) {
                let d = tn(mu, sigma);
                let (lo, hi) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
                prop_assert!(d.cdf(lo) <= d.cdf(hi) + 1e-15);
                prop_assert!((0.0..=1.0).contains(&d.cdf(x1)));
            }

            #[test]
            fn pdf_is_nonnegative_and_finite((mu, sigma) in arb_params(), x in -0.5..1.5_f64) {
                let d = tn(mu, sigma);
                let f = d.pdf(x);
                prop_assert!(f >= 0.0 && f.is_finite());
            }

            #[test]
            fn quantile_round_trip_holds((mu, sigma) in arb_params(), p in 1e-4..0.9999_f64) {
                let d = tn(mu, sigma);
                let x = d.quantile(p).unwrap();
                prop_assert!((0.0..=1.0).contains(&x));
                prop_assert!((d.cdf(x) - p).abs() <= 1e-9);
            }

            #[test]
            fn hdi_lies_in_support_with_requested_mass((mu, sigma) in arb_params(), c in 0.1..0.95_f64) {
                let d = tn(mu, sigma);
                let iv = d.interval(c).unwrap();
                prop_assert!(0.0 <= iv.lo && iv.lo <= iv.hi && iv.hi <= 1.0);
                let mass = d.cdf(iv.hi) - d.cdf(iv.lo);
                prop_assert!((mass - c).abs() <= 1e-7, "mass {} for c {}", mass, c);
            }
        }
    }
}
