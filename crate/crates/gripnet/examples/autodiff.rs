//! The reverse-mode tape underneath the models: build expressions on a
//! graph, read gradients back, fit a small network with the same SGD
//! step the training loops use, and differentiate the bounded-spread
//! likelihood loss.
//!
//! ```text
//! cargo run --example autodiff
//! ```

use gripnet::probdist::TruncatedNormal;
use gripnet::tensor::{sgd_step, Graph, Velocity};
use gripnet::Result;

fn main() -> Result<()> {
    scalar_chain()?;
    fit_curve()?;
    likelihood_gradients()?;
    Ok(())
}

/// A three-element sigmoid-mean chain whose derivative is easy to write
/// down: d mean(sigmoid(x)) / dx_i = s_i (1 - s_i) / n.
fn scalar_chain() -> Result<()> {
    let g: Graph<f64> = Graph::new();
    let x = g.tensor(&[1, 3], vec![-1.0, 0.25, 2.0], true)?;
    let loss = x.sigmoid().mean();
    loss.backward()?;

    let grads = x.grad().expect("x requires grad");
    println!("mean(sigmoid(x)) at x = {:?}", x.value());
    for (i, (xi, gi)) in x.value().iter().zip(&grads).enumerate() {
        let s = 1.0 / (1.0 + (-xi).exp());
        let by_hand = s * (1.0 - s) / 3.0;
        println!(
            "  d/dx[{i}] = {gi:.10}   by hand {by_hand:.10}   diff {:.1e}",
            (gi - by_hand).abs()
        );
    }
    Ok(())
}

/// Fits a 1-16-1 network to y = x^2 on a grid. Parameters live on the
/// graph permanently; the forward expressions built each step are
/// thrown away with `truncate` so the tape never grows.
fn fit_curve() -> Result<()> {
    let g: Graph<f64> = Graph::new();
    let n = 64;
    let hidden = 16;

    // Deterministic, symmetry-breaking initial weights, small enough
    // that the first steps stay tame.
    let ramp = |k: usize, len: usize, scale: f64| -> Vec<f64> {
        (0..len).map(|i| scale * ((i + k) as f64 / len as f64 - 0.5)).collect()
    };
    let w1 = g.tensor(&[1, hidden], ramp(1, hidden, 1.6), true)?;
    let b1 = g.tensor(&[hidden], ramp(5, hidden, 0.8), true)?;
    let w2 = g.tensor(&[hidden, 1], ramp(9, hidden, 0.5), true)?;
    let b2 = g.tensor(&[1], vec![0.0], true)?;
    let params = [w1.clone(), b1.clone(), w2.clone(), b2.clone()];

    // Inputs centred on zero, targets y = x^2.
    let us: Vec<f64> = (0..n).map(|i| 2.0 * i as f64 / (n - 1) as f64 - 1.0).collect();
    let ys: Vec<f64> = us.iter().map(|u| u * u).collect();

    let base = g.mark();
    let mut velocity = Velocity::new();
    println!("\nfitting y = x^2 with a 1-{hidden}-1 network:");
    for step in 0..=400 {
        g.truncate(base);
        g.zero_grads();

        let x = g.tensor(&[n, 1], us.clone(), false)?;
        let target = g.tensor(&[n, 1], ys.clone(), false)?;
        let h = x.matmul(&w1)?.add_bias(&b1)?.relu();
        let out = h.matmul(&w2)?.add_bias(&b2)?;
        let loss = out.mse_loss(&target)?;

        if step % 100 == 0 {
            println!(
                "  step {step:>3}: mse {:.6}   ({} live tape nodes)",
                loss.scalar_value()?,
                g.node_count()
            );
        }
        loss.backward()?;
        sgd_step(&params, 0.02, 0.9, 0.0, &mut velocity)?;
    }
    Ok(())
}

/// The likelihood loss is a first-class tape operation. Its gradients
/// with respect to centre and spread match the distribution's own
/// analytic formulas.
fn likelihood_gradients() -> Result<()> {
    let g: Graph<f64> = Graph::new();
    let mus = [0.3, 0.55, 0.8];
    let sigmas = [0.08, 0.15, 0.25];
    let labels = vec![0.41, 0.50, 0.62];

    let points = g.tensor(&[3], mus.to_vec(), true)?;
    let spreads = g.tensor(&[3], sigmas.to_vec(), true)?;
    let loss = points.truncnorm_nll(&spreads, &labels, 0.0, 1.0)?;
    loss.backward()?;

    let d_mu = points.grad().expect("points require grad");
    let d_sigma = spreads.grad().expect("spreads require grad");
    println!("\nlikelihood loss {:.6} over three forecasts:", loss.scalar_value()?);
    for i in 0..3 {
        let (gm, gs) = TruncatedNormal::new(mus[i], sigmas[i], 0.0, 1.0)?.nll_grad(labels[i])?;
        println!(
            "  forecast {i}: d/dcentre {:+.6} (analytic {gm:+.6}), d/dspread {:+.6} (analytic {gs:+.6})",
            d_mu[i], d_sigma[i]
        );
    }
    Ok(())
}
