//! Image-shaped operations: 2-D convolution, max pooling, global average
//! pooling, and batch normalisation, with their backward rules.
//!
//! All operate on `[n, c, h, w]` row-major tensors. Kernels are square and
//! padding is symmetric zero padding; output extents follow the standard
//! floor convention `(in + 2*padding - kernel) / stride + 1`.

use super::{accumulate, cast, Element, Node, TapeOp, Tensor};
use crate::error::{Error, Result};

/// Geometry of one convolution, saved on the tape for the backward pass.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Batch statistics saved by a training-mode batchnorm for its backward
/// rule.
#[derive(Debug, Clone)]
pub(crate) struct BnSaved<E> {
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
}

/// Affine form saved by an eval-mode batchnorm: `out = x*scale + shift`
/// with `scale = gamma*inv_std` and the running statistics kept for the
/// gamma gradient.
#[derive(Debug, Clone)]
pub(crate) struct BnEvalSaved<E> {
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
    pub scale: Vec<E>,
}

fn out_extent(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn expect_nchw(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "{what} needs a [n, c, h, w] tensor, found {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

impl<E: Element> Tensor<E> {
    /// 2-D convolution of `[n, c_in, h, w]` by weights
    /// `[c_out, c_in, k, k]` with symmetric zero padding. No bias term:
    /// every convolution in the model is followed by batch normalisation,
    /// which absorbs one.
    pub fn conv2d(&self, weight: &Tensor<E>, stride: usize, padding: usize) -> Result<Tensor<E>> {
        self.same_graph(weight)?;
        let (si, sw) = (self.shape(), weight.shape());
        let (n, c_in, h_in, w_in) = expect_nchw(&si, "conv2d input")?;
        if sw.len() != 4 || sw[1] != c_in || sw[2] != sw[3] {
            return Err(Error::shape(format!(
                "conv2d weight must be [c_out, {c_in}, k, k] for input {si:?}, found {sw:?}"
            )));
        }
        let (c_out, k) = (sw[0], sw[2]);
        let (Some(h_out), Some(w_out)) = (
            out_extent(h_in, k, stride, padding),
            out_extent(w_in, k, stride, padding),
        ) else {
            return Err(Error::shape(format!(
                "conv2d kernel {k} with stride {stride}, padding {padding} does not fit input {si:?}"
            )));
        };
        let dims = ConvDims { n, c_in, h_in, w_in, c_out, k, stride, padding, h_out, w_out };

        let value = self.with_inner(|inner| {
            let x = &inner.nodes[self.id].value;
            let w = &inner.nodes[weight.id].value;
            let mut out = vec![E::zero(); n * c_out * h_out * w_out];
            conv_forward(&dims, x, w, &mut out);
            out
        });
        Ok(self.record(
            vec![n, c_out, h_out, w_out],
            value,
            &[self.id, weight.id],
            |out| TapeOp::Conv2d { input: self.id, weight: weight.id, out, dims },
        ))
    }

    /// Max pooling with a square window; out-of-bounds window positions
    /// are ignored (equivalently, padding with negative infinity).
    pub fn maxpool2d(&self, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<E>> {
        let si = self.shape();
        let (n, c, h_in, w_in) = expect_nchw(&si, "maxpool2d")?;
        if padding * 2 >= kernel {
            return Err(Error::shape(format!(
                "maxpool2d padding {padding} must be under half the kernel {kernel}, or a window could be empty"
            )));
        }
        let (Some(h_out), Some(w_out)) = (
            out_extent(h_in, kernel, stride, padding),
            out_extent(w_in, kernel, stride, padding),
        ) else {
            return Err(Error::shape(format!(
                "maxpool2d kernel {kernel} with stride {stride}, padding {padding} does not fit input {si:?}"
            )));
        };
        let mut argmax = vec![0usize; n * c * h_out * w_out];
        let value = self.with_inner(|inner| {
            let x = &inner.nodes[self.id].value;
            let mut out = vec![E::zero(); argmax.len()];
            let mut o = 0;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h_in * w_in;
                    for oy in 0..h_out {
                        for ox in 0..w_out {
                            let mut best = E::neg_infinity();
                            let mut best_idx = 0usize;
                            for ky in 0..kernel {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h_in as isize {
                                    continue;
                                }
                                for kx in 0..kernel {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= w_in as isize {
                                        continue;
                                    }
                                    let idx = base + iy as usize * w_in + ix as usize;
                                    if x[idx] > best {
                                        best = x[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            out[o] = best;
                            argmax[o] = best_idx;
                            o += 1;
                        }
                    }
                }
            }
            out
        });
        Ok(self.record(vec![n, c, h_out, w_out], value, &[self.id], |out| TapeOp::MaxPool {
            input: self.id,
            out,
            argmax,
        }))
    }

    /// Spatial mean per channel: `[n, c, h, w]` to `[n, c]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<E>> {
        let si = self.shape();
        let (n, c, h, w) = expect_nchw(&si, "global_avg_pool")?;
        let spatial = h * w;
        let inv: E = cast(1.0 / spatial as f64);
        let value = self.with_inner(|inner| {
            let x = &inner.nodes[self.id].value;
            let mut out = vec![E::zero(); n * c];
            for (i, o) in out.iter_mut().enumerate() {
                let base = i * spatial;
                let mut total = E::zero();
                for &v in &x[base..base + spatial] {
                    total += v;
                }
                *o = total * inv;
            }
            out
        });
        Ok(self.record(vec![n, c], value, &[self.id], |out| TapeOp::GlobalAvgPool {
            input: self.id,
            out,
            spatial,
        }))
    }

    /// Batch normalisation over the channel dimension of `[n, c, h, w]`.
    ///
    /// Training mode normalises by batch statistics (biased variance),
    /// then updates the running statistics in place:
    /// `running <- (1 - momentum) * running + momentum * batch`, with the
    /// *unbiased* variance entering the running buffer. Eval mode is the
    /// affine map through the running statistics and touches nothing.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        running_mean: &Tensor<E>,
        running_var: &Tensor<E>,
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Tensor<E>> {
        for other in [gamma, beta, running_mean, running_var] {
            self.same_graph(other)?;
        }
        let si = self.shape();
        let (n, c, h, w) = expect_nchw(&si, "batchnorm2d")?;
        for (name, t) in [
            ("gamma", gamma),
            ("beta", beta),
            ("running_mean", running_mean),
            ("running_var", running_var),
        ] {
            let s = t.shape();
            if s != vec![c] {
                return Err(Error::shape(format!(
                    "batchnorm2d {name} must be [{c}] for input {si:?}, found {s:?}"
                )));
            }
        }
        let m = n * h * w;
        let hw = h * w;
        if training && m < 2 {
            return Err(Error::shape(format!(
                "batchnorm2d training needs at least 2 values per channel, found {m} (input {si:?})"
            )));
        }

        if training {
            let (value, mean, inv_std, batch_var) = self.with_inner(|inner| {
                let x = &inner.nodes[self.id].value;
                let ga = &inner.nodes[gamma.id].value;
                let be = &inner.nodes[beta.id].value;
                let mut mean = vec![E::zero(); c];
                let mut var = vec![E::zero(); c];
                for ci in 0..c {
                    let mut total = E::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for &v in &x[base..base + hw] {
                            total += v;
                        }
                    }
                    let mu = total / cast(m as f64);
                    let mut ssq = E::zero();
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for &v in &x[base..base + hw] {
                            let d = v - mu;
                            ssq += d * d;
                        }
                    }
                    mean[ci] = mu;
                    var[ci] = ssq / cast(m as f64);
                }
                let inv_std: Vec<E> = var
                    .iter()
                    .map(|&v| E::one() / (v + cast(eps)).sqrt())
                    .collect();
                let mut out = vec![E::zero(); x.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let (mu, is, g, b) = (mean[ci], inv_std[ci], ga[ci], be[ci]);
                        for j in base..base + hw {
                            out[j] = (x[j] - mu) * is * g + b;
                        }
                    }
                }
                (out, mean, inv_std, var)
            });
            // Update running statistics in place; the unbiased variance
            // enters the running buffer, matching common framework
            // behaviour so eval-mode numbers are comparable.
            {
                let unbias: E = cast(m as f64 / (m as f64 - 1.0));
                let mom: E = cast(momentum);
                let keep: E = E::one() - mom;
                let mut inner = self.graph.inner.borrow_mut();
                for ci in 0..c {
                    let rm = &mut inner.nodes[running_mean.id].value[ci];
                    *rm = keep * *rm + mom * mean[ci];
                }
                for ci in 0..c {
                    let rv = &mut inner.nodes[running_var.id].value[ci];
                    *rv = keep * *rv + mom * batch_var[ci] * unbias;
                }
            }
            let saved = BnSaved { mean, inv_std };
            Ok(self.record(si, value, &[self.id, gamma.id, beta.id], |out| {
                TapeOp::BatchNormTrain {
                    input: self.id,
                    gamma: gamma.id,
                    beta: beta.id,
                    out,
                    saved,
                }
            }))
        } else {
            let (value, saved) = self.with_inner(|inner| {
                let x = &inner.nodes[self.id].value;
                let ga = &inner.nodes[gamma.id].value;
                let be = &inner.nodes[beta.id].value;
                let rm = &inner.nodes[running_mean.id].value;
                let rv = &inner.nodes[running_var.id].value;
                let inv_std: Vec<E> = rv
                    .iter()
                    .map(|&v| E::one() / (v + cast(eps)).sqrt())
                    .collect();
                let scale: Vec<E> = ga.iter().zip(&inv_std).map(|(&g, &is)| g * is).collect();
                let mut out = vec![E::zero(); x.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let (s, sh) = (scale[ci], be[ci] - rm[ci] * scale[ci]);
                        for j in base..base + hw {
                            out[j] = x[j] * s + sh;
                        }
                    }
                }
                (out, BnEvalSaved { mean: rm.clone(), inv_std, scale })
            });
            Ok(self.record(si, value, &[self.id, gamma.id, beta.id], |out| {
                TapeOp::BatchNormEval {
                    input: self.id,
                    gamma: gamma.id,
                    beta: beta.id,
                    out,
                    saved,
                }
            }))
        }
    }
}

fn conv_forward<E: Element>(dims: &ConvDims, x: &[E], w: &[E], out: &mut [E]) {
    let ConvDims { n, c_in, h_in, w_in, c_out, k, stride, padding, h_out, w_out } = *dims;
    for ni in 0..n {
        for co in 0..c_out {
            for ci in 0..c_in {
                let in_base = (ni * c_in + ci) * h_in * w_in;
                let w_base = (co * c_in + ci) * k * k;
                for oy in 0..h_out {
                    let out_base = ((ni * c_out + co) * h_out + oy) * w_out;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h_in as isize {
                            continue;
                        }
                        let in_row = in_base + iy as usize * w_in;
                        let w_row = w_base + ky * k;
                        for ox in 0..w_out {
                            let mut acc = out[out_base + ox];
                            let ix0 = (ox * stride) as isize - padding as isize;
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if ix >= 0 && ix < w_in as isize {
                                    acc += x[in_row + ix as usize] * w[w_row + kx];
                                }
                            }
                            out[out_base + ox] = acc;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward<E: Element>(
    input: usize,
    weight: usize,
    out: usize,
    dims: &ConvDims,
    nodes: &[Node<E>],
    adj: &mut [Option<Vec<E>>],
) {
    let need_di = nodes[input].needs_grad;
    let need_dw = nodes[weight].needs_grad;
    if !need_di && !need_dw {
        return;
    }
    let Some(go) = adj[out].take() else { return };
    let ConvDims { n, c_in, h_in, w_in, c_out, k, stride, padding, h_out, w_out } = *dims;
    let x = &nodes[input].value;
    let w = &nodes[weight].value;
    let mut di = if need_di { vec![E::zero(); x.len()] } else { Vec::new() };
    let mut dw = if need_dw { vec![E::zero(); w.len()] } else { Vec::new() };

    for ni in 0..n {
        for co in 0..c_out {
            for ci in 0..c_in {
                let in_base = (ni * c_in + ci) * h_in * w_in;
                let w_base = (co * c_in + ci) * k * k;
                for oy in 0..h_out {
                    let out_base = ((ni * c_out + co) * h_out + oy) * w_out;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h_in as isize {
                            continue;
                        }
                        let in_row = in_base + iy as usize * w_in;
                        let w_row = w_base + ky * k;
                        for ox in 0..w_out {
                            let g = go[out_base + ox];
                            if g == E::zero() {
                                continue;
                            }
                            let ix0 = (ox * stride) as isize - padding as isize;
                            for kx in 0..k {
                                let ix = ix0 + kx as isize;
                                if ix >= 0 && ix < w_in as isize {
                                    let ii = in_row + ix as usize;
                                    if need_di {
                                        di[ii] += g * w[w_row + kx];
                                    }
                                    if need_dw {
                                        dw[w_row + kx] += g * x[ii];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if need_di {
        accumulate(adj, input, x.len(), |gi| {
            for (g, d) in gi.iter_mut().zip(&di) {
                *g += *d;
            }
        });
    }
    if need_dw {
        accumulate(adj, weight, w.len(), |gw| {
            for (g, d) in gw.iter_mut().zip(&dw) {
                *g += *d;
            }
        });
    }
    adj[out] = Some(go);
}

pub(crate) fn batchnorm_backward<E: Element>(
    input: usize,
    gamma: usize,
    beta: usize,
    out: usize,
    saved: &BnSaved<E>,
    nodes: &[Node<E>],
    adj: &mut [Option<Vec<E>>],
) {
    let Some(go) = adj[out].take() else { return };
    let shape = &nodes[input].shape;
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let m = n * hw;
    let x = &nodes[input].value;
    let ga = &nodes[gamma].value;

    // Per-channel reductions of dy and dy * xhat.
    let mut sum_dy = vec![E::zero(); c];
    let mut sum_dy_xhat = vec![E::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (mu, is) = (saved.mean[ci], saved.inv_std[ci]);
            let (mut s1, mut s2) = (E::zero(), E::zero());
            for j in base..base + hw {
                let dy = go[j];
                s1 += dy;
                s2 += dy * (x[j] - mu) * is;
            }
            sum_dy[ci] += s1;
            sum_dy_xhat[ci] += s2;
        }
    }
    if nodes[beta].needs_grad {
        accumulate(adj, beta, c, |gb| {
            for ci in 0..c {
                gb[ci] += sum_dy[ci];
            }
        });
    }
    if nodes[gamma].needs_grad {
        accumulate(adj, gamma, c, |gg| {
            for ci in 0..c {
                gg[ci] += sum_dy_xhat[ci];
            }
        });
    }
    if nodes[input].needs_grad {
        let inv_m: E = cast(1.0 / m as f64);
        let me: E = cast(m as f64);
        accumulate(adj, input, x.len(), |gi| {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let (mu, is) = (saved.mean[ci], saved.inv_std[ci]);
                    let coef = ga[ci] * is * inv_m;
                    for j in base..base + hw {
                        let xhat = (x[j] - mu) * is;
                        gi[j] += coef * (me * go[j] - sum_dy[ci] - xhat * sum_dy_xhat[ci]);
                    }
                }
            }
        });
    }
    adj[out] = Some(go);
}

pub(crate) fn batchnorm_eval_backward<E: Element>(
    input: usize,
    gamma: usize,
    beta: usize,
    out: usize,
    saved: &BnEvalSaved<E>,
    nodes: &[Node<E>],
    adj: &mut [Option<Vec<E>>],
) {
    let Some(go) = adj[out].take() else { return };
    let shape = &nodes[input].shape;
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let x = &nodes[input].value;
    if nodes[input].needs_grad {
        accumulate(adj, input, x.len(), |gi| {
            for (j, g) in go.iter().enumerate() {
                gi[j] += *g * saved.scale[(j / hw) % c];
            }
        });
    }
    if nodes[beta].needs_grad {
        accumulate(adj, beta, c, |gb| {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for j in base..base + hw {
                        gb[ci] += go[j];
                    }
                }
            }
        });
    }
    if nodes[gamma].needs_grad {
        accumulate(adj, gamma, c, |gg| {
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let (mu, is) = (saved.mean[ci], saved.inv_std[ci]);
                    for j in base..base + hw {
                        gg[ci] += go[j] * (x[j] - mu) * is;
                    }
                }
            }
        });
    }
    adj[out] = Some(go);
}
