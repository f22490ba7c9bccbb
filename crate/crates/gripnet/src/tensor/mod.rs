//! A minimal dense tensor library with reverse-mode automatic
//! differentiation: the substrate for the network, its losses, and the
//! optimizer.
//!
//! # Shape of the machinery
//!
//! A [`Graph`] owns every tensor's storage plus a tape of executed
//! operations. A [`Tensor`] is a cheap handle (graph reference + node id).
//! Running an operation computes the forward value immediately and records
//! a tape entry holding whatever the backward rule will need; calling
//! [`Tensor::backward`] on a scalar walks the tape in reverse and
//! accumulates `d loss / d node` into every tensor built with
//! `requires_grad`.
//!
//! Repeated `backward` calls *add* into existing gradients (the
//! documented accumulation convention); call [`Graph::zero_grads`] between
//! optimizer steps. A training loop records one tape per batch and calls
//! [`Graph::truncate`] afterwards to drop the batch's activations while
//! keeping parameter nodes alive.
//!
//! The element type is generic over [`Element`] (`f32` or `f64`). The
//! model trains in `f32`; the test suite runs the same gradient rules in
//! `f64`, where finite differences resolve to ~1e-10 and a wrong rule
//! cannot hide behind single-precision noise.
//!
//! Everything is single-threaded and deterministic: the only randomness
//! (dropout masks) comes from an explicit per-call seed.

mod conv;

use crate::error::{Error, Result};
use crate::probdist;
use num_traits::Float;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

pub(crate) use conv::{BnEvalSaved, BnSaved, ConvDims};

/// Storage scalar for a graph: `f32` in the product, `f64` in tests.
pub trait Element:
    Float + num_traits::NumAssign + fmt::Debug + fmt::Display + 'static
{
}
impl Element for f32 {}
impl Element for f64 {}

/// Converts an `f64` constant into the element type. Infallible for the
/// two supported types on finite input.
pub(crate) fn cast<E: Element>(x: f64) -> E {
    E::from(x).expect("finite f64 converts into every supported element type")
}

/// Converts an element back to `f64` for reporting and distribution math.
pub(crate) fn upcast<E: Element>(x: E) -> f64 {
    x.to_f64().expect("every supported element type widens to f64")
}

struct Node<E> {
    shape: Vec<usize>,
    value: Vec<E>,
    grad: Option<Vec<E>>,
    requires_grad: bool,
    /// Whether any gradient can flow through this node: it requires a
    /// gradient itself or depends on a node that does. Backward skips
    /// computing input gradients where this is false (e.g. image batches).
    needs_grad: bool,
}

/// One recorded operation with everything its backward rule needs. Node
/// ids refer into the owning graph.
enum TapeOp<E> {
    Matmul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    Conv2d { input: usize, weight: usize, out: usize, dims: ConvDims },
    BatchNormTrain { input: usize, gamma: usize, beta: usize, out: usize, saved: BnSaved<E> },
    BatchNormEval { input: usize, gamma: usize, beta: usize, out: usize, saved: BnEvalSaved<E> },
    MaxPool { input: usize, out: usize, argmax: Vec<usize> },
    GlobalAvgPool { input: usize, out: usize, spatial: usize },
    Relu { input: usize, out: usize },
    Sigmoid { input: usize, out: usize },
    Add { a: usize, b: usize, out: usize },
    AddBias { input: usize, bias: usize, out: usize, cols: usize },
    MulScalar { input: usize, out: usize, c: E },
    Mean { input: usize, out: usize },
    MseLoss { pred: usize, target: usize, out: usize },
    Dropout { input: usize, out: usize, keep: Vec<bool>, scale: E },
    ConcatCols { a: usize, b: usize, out: usize, rows: usize, cols_a: usize, cols_b: usize },
    Reshape { input: usize, out: usize },
    /// Truncated-normal NLL against fixed labels; saves the per-sample
    /// `(mu, floored sigma, label, sigma-was-clamped)` quadruple so the
    /// backward rule can query the analytic derivatives.
    TruncNormNll { points: usize, sigmas: usize, out: usize, saved: Vec<NllSample> },
}

#[derive(Debug, Clone, Copy)]
struct NllSample {
    mu: f64,
    sigma: f64,
    label: f64,
    a: f64,
    b: f64,
    clamped: bool,
}

struct GraphInner<E> {
    nodes: Vec<Node<E>>,
    tape: Vec<TapeOp<E>>,
}

/// Owner of tensor storage and the operation tape.
pub struct Graph<E: Element> {
    inner: Rc<RefCell<GraphInner<E>>>,
}

impl<E: Element> Clone for Graph<E> {
    fn clone(&self) -> Self {
        Graph { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// A position in the graph, used to roll back per-batch activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphMark {
    nodes: usize,
    tape: usize,
}

/// Handle to one tensor inside a [`Graph`].
pub struct Tensor<E: Element> {
    graph: Graph<E>,
    id: usize,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { graph: self.graph.clone(), id: self.id }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner { nodes: Vec::new(), tape: Vec::new() })),
        }
    }

    /// Creates a tensor from explicit data. The data length must equal the
    /// product of the shape extents.
    pub fn tensor(&self, shape: &[usize], data: Vec<E>, requires_grad: bool) -> Result<Tensor<E>> {
        let expect: usize = shape.iter().product();
        if expect != data.len() || shape.is_empty() {
            return Err(Error::shape(format!(
                "tensor data length {} does not match shape {shape:?} (product {expect})",
                data.len()
            )));
        }
        Ok(self.push_node(shape.to_vec(), data, requires_grad, requires_grad))
    }

    /// Creates a zero-filled tensor.
    pub fn zeros(&self, shape: &[usize], requires_grad: bool) -> Result<Tensor<E>> {
        let len: usize = shape.iter().product();
        self.tensor(shape, vec![E::zero(); len], requires_grad)
    }

    /// Creates a scalar (shape `[1]`) constant.
    pub fn scalar(&self, v: f64) -> Tensor<E> {
        self.push_node(vec![1], vec![cast(v)], false, false)
    }

    fn push_node(
        &self,
        shape: Vec<usize>,
        value: Vec<E>,
        requires_grad: bool,
        needs_grad: bool,
    ) -> Tensor<E> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { shape, value, grad: None, requires_grad, needs_grad });
        Tensor { graph: self.clone(), id: inner.nodes.len() - 1 }
    }

    /// Current node/tape position; [`Graph::truncate`] rolls back to it.
    pub fn mark(&self) -> GraphMark {
        let inner = self.inner.borrow();
        GraphMark { nodes: inner.nodes.len(), tape: inner.tape.len() }
    }

    /// Drops every node and tape entry recorded after `mark`. Used by the
    /// training loop to release a batch's activations; tensors created
    /// after the mark become dangling and must not be used again.
    pub fn truncate(&self, mark: GraphMark) {
        let mut inner = self.inner.borrow_mut();
        assert!(
            mark.nodes <= inner.nodes.len() && mark.tape <= inner.tape.len(),
            "graph mark from a different or newer graph state"
        );
        inner.nodes.truncate(mark.nodes);
        inner.tape.truncate(mark.tape);
    }

    /// Clears the gradient buffers of every node.
    pub fn zero_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for node in &mut inner.nodes {
            node.grad = None;
        }
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }
}

impl<E: Element> Tensor<E> {
    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.graph.inner.borrow().nodes[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// Copies the tensor's values out.
    pub fn value(&self) -> Vec<E> {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    /// The value of a scalar tensor as `f64`.
    pub fn scalar_value(&self) -> Result<f64> {
        let inner = self.graph.inner.borrow();
        let node = &inner.nodes[self.id];
        if node.value.len() != 1 {
            return Err(Error::shape(format!(
                "expected a scalar, found shape {:?}",
                node.shape
            )));
        }
        Ok(upcast(node.value[0]))
    }

    /// Overwrites the tensor's values in place (same length required).
    pub fn set_value(&self, data: &[E]) -> Result<()> {
        let mut inner = self.graph.inner.borrow_mut();
        let node = &mut inner.nodes[self.id];
        if node.value.len() != data.len() {
            return Err(Error::shape(format!(
                "set_value length {} does not match tensor length {}",
                data.len(),
                node.value.len()
            )));
        }
        node.value.copy_from_slice(data);
        Ok(())
    }

    /// Copies the accumulated gradient out, if any backward pass has
    /// produced one.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    /// Turns gradient tracking for this leaf on or off. Freezing a
    /// parameter this way makes every later recorded op that only
    /// depends on it skip its backward work entirely; operations already
    /// on the tape keep the flag they saw at record time. Turning
    /// tracking off also drops any accumulated gradient.
    pub fn set_requires_grad(&self, on: bool) {
        let mut inner = self.graph.inner.borrow_mut();
        let node = &mut inner.nodes[self.id];
        node.requires_grad = on;
        node.needs_grad = on;
        if !on {
            node.grad = None;
        }
    }

    fn same_graph(&self, other: &Tensor<E>) -> Result<()> {
        if !Rc::ptr_eq(&self.graph.inner, &other.graph.inner) {
            return Err(Error::shape(
                "tensors belong to different graphs and cannot be combined",
            ));
        }
        Ok(())
    }

    fn with_inner<T>(&self, f: impl FnOnce(&GraphInner<E>) -> T) -> T {
        f(&self.graph.inner.borrow())
    }

    /// Records `op` producing a new node with `shape`/`value`; the output
    /// propagates `needs_grad` from the listed inputs.
    fn record(
        &self,
        shape: Vec<usize>,
        value: Vec<E>,
        inputs: &[usize],
        make_op: impl FnOnce(usize) -> TapeOp<E>,
    ) -> Tensor<E> {
        let needs = {
            let inner = self.graph.inner.borrow();
            inputs.iter().any(|&i| inner.nodes[i].needs_grad)
        };
        let out = self.graph.push_node(shape, value, false, needs);
        let op = make_op(out.id);
        self.graph.inner.borrow_mut().tape.push(op);
        out
    }

    /// Matrix product of `[m, k]` by `[k, n]`.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_graph(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!(
                "matmul needs [m, k] by [k, n], found {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = self.with_inner(|inner| {
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            let mut out = vec![E::zero(); m * n];
            for i in 0..m {
                for p in 0..k {
                    let aik = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
            out
        });
        Ok(self.record(vec![m, n], value, &[self.id, other.id], |out| TapeOp::Matmul {
            a: self.id,
            b: other.id,
            out,
            m,
            k,
            n,
        }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_graph(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(Error::shape(format!(
                "add needs matching shapes, found {sa:?} and {sb:?}"
            )));
        }
        let value = self.with_inner(|inner| {
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            a.iter().zip(b).map(|(&x, &y)| x + y).collect()
        });
        Ok(self.record(sa, value, &[self.id, other.id], |out| TapeOp::Add {
            a: self.id,
            b: other.id,
            out,
        }))
    }

    /// Adds a `[cols]` bias vector to every row of a `[rows, cols]` tensor.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_graph(bias)?;
        let (s, sb) = (self.shape(), bias.shape());
        if s.len() != 2 || sb.len() != 1 || sb[0] != s[1] {
            return Err(Error::shape(format!(
                "add_bias needs [rows, cols] and [cols], found {s:?} and {sb:?}"
            )));
        }
        let cols = s[1];
        let value = self.with_inner(|inner| {
            let x = &inner.nodes[self.id].value;
            let b = &inner.nodes[bias.id].value;
            x.iter().enumerate().map(|(i, &v)| v + b[i % cols]).collect()
        });
        Ok(self.record(s, value, &[self.id, bias.id], |out| TapeOp::AddBias {
            input: self.id,
            bias: bias.id,
            out,
            cols,
        }))
    }

    /// Multiplies every element by a constant.
    pub fn mul_scalar(&self, c: f64) -> Tensor<E> {
        let ce: E = cast(c);
        let value = self.with_inner(|inner| {
            inner.nodes[self.id].value.iter().map(|&x| x * ce).collect()
        });
        self.record(self.shape(), value, &[self.id], |out| TapeOp::MulScalar {
            input: self.id,
            out,
            c: ce,
        })
    }

    /// Rectified linear unit, elementwise `max(x, 0)`.
    pub fn relu(&self) -> Tensor<E> {
        let value = self.with_inner(|inner| {
            inner.nodes[self.id]
                .value
                .iter()
                .map(|&x| if x > E::zero() { x } else { E::zero() })
                .collect()
        });
        self.record(self.shape(), value, &[self.id], |out| TapeOp::Relu {
            input: self.id,
            out,
        })
    }

    /// Logistic sigmoid, elementwise `1 / (1 + exp(-x))`.
    pub fn sigmoid(&self) -> Tensor<E> {
        let one = E::one();
        let value = self.with_inner(|inner| {
            inner.nodes[self.id]
                .value
                .iter()
                .map(|&x| one / (one + (-x).exp()))
                .collect()
        });
        self.record(self.shape(), value, &[self.id], |out| TapeOp::Sigmoid {
            input: self.id,
            out,
        })
    }

    /// Mean over every element, producing a scalar.
    pub fn mean(&self) -> Tensor<E> {
        let value = self.with_inner(|inner| {
            let v = &inner.nodes[self.id].value;
            let mut total = E::zero();
            for &x in v {
                total += x;
            }
            vec![total / cast(v.len() as f64)]
        });
        self.record(vec![1], value, &[self.id], |out| TapeOp::Mean {
            input: self.id,
            out,
        })
    }

    /// Mean squared error against a same-shape target, producing a scalar.
    pub fn mse_loss(&self, target: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_graph(target)?;
        let (s, st) = (self.shape(), target.shape());
        if s != st {
            return Err(Error::shape(format!(
                "mse_loss needs matching shapes, found {s:?} and {st:?}"
            )));
        }
        let value = self.with_inner(|inner| {
            let p = &inner.nodes[self.id].value;
            let t = &inner.nodes[target.id].value;
            let mut total = E::zero();
            for (&a, &b) in p.iter().zip(t) {
                let d = a - b;
                total += d * d;
            }
            vec![total / cast(p.len() as f64)]
        });
        Ok(self.record(vec![1], value, &[self.id, target.id], |out| TapeOp::MseLoss {
            pred: self.id,
            target: target.id,
            out,
        }))
    }

    /// Inverted dropout. At train time each element is zeroed with
    /// probability `p` (mask drawn from the explicit seed) and survivors
    /// are scaled by `1/(1-p)`; at eval time this is the identity.
    pub fn dropout(&self, p: f64, training: bool, seed: u64) -> Result<Tensor<E>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            // Identity, still recorded so gradients flow through.
            let value = self.with_inner(|inner| inner.nodes[self.id].value.clone());
            let n = value.len();
            return Ok(self.record(self.shape(), value, &[self.id], |out| TapeOp::Dropout {
                input: self.id,
                out,
                keep: vec![true; n],
                scale: E::one(),
            }));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.len();
        let keep: Vec<bool> = (0..n)
            .map(|_| {
                let u = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                u >= p
            })
            .collect();
        let scale: E = cast(1.0 / (1.0 - p));
        let value = self.with_inner(|inner| {
            inner.nodes[self.id]
                .value
                .iter()
                .zip(&keep)
                .map(|(&x, &k)| if k { x * scale } else { E::zero() })
                .collect()
        });
        Ok(self.record(self.shape(), value, &[self.id], |out| TapeOp::Dropout {
            input: self.id,
            out,
            keep,
            scale,
        }))
    }

    /// Concatenates two `[rows, *]` tensors along columns.
    pub fn concat_cols(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_graph(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape(format!(
                "concat_cols needs [rows, c1] and [rows, c2], found {sa:?} and {sb:?}"
            )));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let value = self.with_inner(|inner| {
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            let mut out = Vec::with_capacity(rows * (ca + cb));
            for r in 0..rows {
                out.extend_from_slice(&a[r * ca..(r + 1) * ca]);
                out.extend_from_slice(&b[r * cb..(r + 1) * cb]);
            }
            out
        });
        Ok(self.record(vec![rows, ca + cb], value, &[self.id, other.id], |out| {
            TapeOp::ConcatCols {
                a: self.id,
                b: other.id,
                out,
                rows,
                cols_a: ca,
                cols_b: cb,
            }
        }))
    }

    /// Reshapes `[n, d1, d2, ...]` into `[n, d1*d2*...]`. Row-major
    /// layout makes this a pure copy.
    pub fn flatten(&self) -> Result<Tensor<E>> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::shape(format!(
                "flatten needs at least two dimensions, found {s:?}"
            )));
        }
        let rest: usize = s[1..].iter().product();
        let value = self.with_inner(|inner| inner.nodes[self.id].value.clone());
        Ok(self.record(vec![s[0], rest], value, &[self.id], |out| TapeOp::Reshape {
            input: self.id,
            out,
        }))
    }

    /// Summed truncated-normal negative log-likelihood of a batch: `self`
    /// holds the location parameters, `sigmas` the scales, each of length
    /// `labels.len()`. Scales are floored at [`probdist::SIGMA_FLOOR`]
    /// inside the op (a floored sample contributes zero scale gradient).
    /// Distribution math runs in `f64` regardless of the element type.
    pub fn truncnorm_nll(
        &self,
        sigmas: &Tensor<E>,
        labels: &[f64],
        a: f64,
        b: f64,
    ) -> Result<Tensor<E>> {
        self.same_graph(sigmas)?;
        let n = labels.len();
        if self.len() != n || sigmas.len() != n || n == 0 {
            return Err(Error::shape(format!(
                "truncnorm_nll needs equal nonzero lengths, found points {}, sigmas {}, labels {n}",
                self.len(),
                sigmas.len()
            )));
        }
        let mut saved = Vec::with_capacity(n);
        let mut total = 0.0;
        {
            let inner = self.graph.inner.borrow();
            let points = &inner.nodes[self.id].value;
            let raw_sigmas = &inner.nodes[sigmas.id].value;
            for i in 0..n {
                let mu = upcast(points[i]);
                let raw = upcast(raw_sigmas[i]);
                let clamped = raw < probdist::SIGMA_FLOOR;
                let sigma = if clamped { probdist::SIGMA_FLOOR } else { raw };
                let d = probdist::TruncatedNormal::new(mu, sigma, a, b)
                    .map_err(|e| Error::numeric(format!("nll loss sample {i}: {e}")))?;
                let nll = d.nll(labels[i])?;
                if !nll.is_finite() {
                    return Err(Error::numeric(format!(
                        "nll loss sample {i}: label {} outside support [{a}, {b}]",
                        labels[i]
                    )));
                }
                total += nll;
                saved.push(NllSample { mu, sigma, label: labels[i], a, b, clamped });
            }
        }
        Ok(self.record(vec![1], vec![cast(total)], &[self.id, sigmas.id], |out| {
            TapeOp::TruncNormNll {
                points: self.id,
                sigmas: sigmas.id,
                out,
                saved,
            }
        }))
    }

    /// Reverse-mode differentiation from this scalar. Walks the tape
    /// backwards once and adds `d self / d t` into the gradient of every
    /// `requires_grad` tensor `t`.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.graph.inner.borrow_mut();
        let n_nodes = inner.nodes.len();
        if inner.nodes[self.id].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward starts from a scalar, found shape {:?}",
                inner.nodes[self.id].shape
            )));
        }
        // Scratch adjoints for every node; only requires_grad results are
        // persisted at the end.
        let mut adj: Vec<Option<Vec<E>>> = vec![None; n_nodes];
        adj[self.id] = Some(vec![E::one()]);

        let inner = &mut *inner;
        for op in inner.tape.iter().rev() {
            backward_step(op, &inner.nodes, &mut adj);
        }
        for (node, adj) in inner.nodes.iter_mut().zip(adj) {
            if !node.requires_grad {
                continue;
            }
            let Some(adj) = adj else { continue };
            match &mut node.grad {
                Some(g) => {
                    for (gi, ai) in g.iter_mut().zip(adj) {
                        *gi += ai;
                    }
                }
                None => node.grad = Some(adj),
            }
        }
        Ok(())
    }
}

/// Adds `src` into the adjoint buffer of node `id`, allocating on first
/// touch.
fn accumulate<E: Element>(adj: &mut [Option<Vec<E>>], id: usize, len: usize, f: impl FnOnce(&mut [E])) {
    let buf = adj[id].get_or_insert_with(|| vec![E::zero(); len]);
    f(buf);
}

fn backward_step<E: Element>(op: &TapeOp<E>, nodes: &[Node<E>], adj: &mut [Option<Vec<E>>]) {
    match op {
        TapeOp::Matmul { a, b, out, m, k, n } => {
            let Some(go) = adj[*out].take() else { return };
            let (m, k, n) = (*m, *k, *n);
            if nodes[*a].needs_grad {
                let bval = &nodes[*b].value;
                accumulate(adj, *a, m * k, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let g = go[i * n + j];
                            for p in 0..k {
                                ga[i * k + p] += g * bval[p * n + j];
                            }
                        }
                    }
                });
            }
            if nodes[*b].needs_grad {
                let aval = &nodes[*a].value;
                accumulate(adj, *b, k * n, |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = aval[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += av * go[i * n + j];
                            }
                        }
                    }
                });
            }
            adj[*out] = Some(go);
        }
        TapeOp::Conv2d { input, weight, out, dims } => {
            conv::conv2d_backward(*input, *weight, *out, dims, nodes, adj);
        }
        TapeOp::BatchNormTrain { input, gamma, beta, out, saved } => {
            conv::batchnorm_backward(*input, *gamma, *beta, *out, saved, nodes, adj);
        }
        TapeOp::BatchNormEval { input, gamma, beta, out, saved } => {
            conv::batchnorm_eval_backward(*input, *gamma, *beta, *out, saved, nodes, adj);
        }
        TapeOp::MaxPool { input, out, argmax } => {
            if !nodes[*input].needs_grad {
                return;
            }
            let Some(go) = adj[*out].take() else { return };
            let len = nodes[*input].value.len();
            accumulate(adj, *input, len, |gi| {
                for (o, &src) in argmax.iter().enumerate() {
                    gi[src] += go[o];
                }
            });
            adj[*out] = Some(go);
        }
        TapeOp::GlobalAvgPool { input, out, spatial } => {
            if !nodes[*input].needs_grad {
                return;
            }
            let Some(go) = adj[*out].take() else { return };
            let len = nodes[*input].value.len();
            let inv: E = cast(1.0 / *spatial as f64);
            accumulate(adj, *input, len, |gi| {
                for (i, g) in gi.iter_mut().enumerate() {
                    *g += go[i / spatial] * inv;
                }
            });
            adj[*out] = Some(go);
        }
        TapeOp::Relu { input, out } => {
            if !nodes[*input].needs_grad {
                return;
            }
            let Some(go) = adj[*out].take() else { return };
            let x = &nodes[*input].value;
            accumulate(adj, *input, x.len(), |gi| {
                for i in 0..x.len() {
                    if x[i] > E::zero() {
                        gi[i] += go[i];
                    }
                }
            });
            adj[*out] = Some(go);
        }
        TapeOp::Sigmoid { input, out } => {
            if !nodes[*input].needs_grad {
                return;
            }
            let Some(go) = adj[*out].take() else { return };
            let y = &nodes[*out].value;
            accumulate(adj, *input, y.len(), |gi| {
                for i in 0..y.len() {
                    gi[i] += go[i] * y[i] * (E::one() - y[i]);
                }
            });
            adj[*out] = Some(go);
        }
        TapeOp::Add { a, b, out } => {
            let Some(go) = adj[*out].take() else { return };
            for id in [*a, *b] {
                if nodes[id].needs_grad {
                    accumulate(adj, id, go.len(), |gi| {
                        for i in 0..go.len() {
                            gi[i] += go[i];
                        }
                    });
                }
            }
            adj[*out] = Some(go);
        }
        TapeOp::AddBias { input, bias, out, cols } => {
            let Some(go) = adj[*out].take() else { return };
            if nodes[*input].needs_grad {
                accumulate(adj, *input, go.len(), |gi| {
                    for i in 0..go.len() {
                        gi[i] += go[i];
                    }
                });
            }
            if nodes[*bias].needs_grad {
                accumulate(adj, *bias, *cols, |gb| {
                    for (i, g) in go.iter().enumerate() {
                        gb[i % cols] += *g;
                    }
                });
            }
            adj[*out] = Some(go);
        }
        TapeOp::MulScalar { input, out, c } => {
            if !nodes[*input].needs_grad {
                return;
            }
            let Some(go) = adj[*out].take() else { return };
            accumulate(adj, *input, go.len(), |gi| {
                for i in 0..go.len() {
                    gi[i] += go[i] * *c;
                }
            });
            adj[*out] = Some(go);
        }
        TapeOp::Mean { input, out } => {
            if !nodes[*input].needs_grad {
                return;
            }
            let Some(go) = adj[*out].take() else { return };
            let len = nodes[*input].value.len();
            let g = go[0] / cast(len as f64);
            accumulate(adj, *input, len, |gi| {
                for gi in gi.iter_mut() {
                    *gi += g;
                }
            });
            adj[*out] = Some(go);
        }
        TapeOp::MseLoss { pred, target, out } => {
            let Some(go) = adj[*out].take() else { return };
            let p = &nodes[*pred].value;
            let t = &nodes[*target].value;
            let coef = go[0] * cast::<E>(2.0 / p.len() as f64);
            if nodes[*pred].needs_grad {
                accumulate(adj, *pred, p.len(), |gi| {
                    for i in 0..p.len() {
                        gi[i] += coef * (p[i] - t[i]);
                    }
                });
            }
            if nodes[*target].needs_grad {
                accumulate(adj, *target, t.len(), |gi| {
                    for i in 0..t.len() {
                        gi[i] -= coef * (p[i] - t[i]);
                    }
                });
            }
            adj[*out] = Some(go);
        }
        TapeOp::Dropout { input, out, keep, scale } => {
            if !nodes[*input].needs_grad {
                return;
            }
            let Some(go) = adj[*out].take() else { return };
            accumulate(adj, *input, go.len(), |gi| {
                for i in 0..go.len() {
                    if keep[i] {
                        gi[i] += go[i] * *scale;
                    }
                }
            });
            adj[*out] = Some(go);
        }
        TapeOp::ConcatCols { a, b, out, rows, cols_a, cols_b } => {
            let Some(go) = adj[*out].take() else { return };
            let total = cols_a + cols_b;
            if nodes[*a].needs_grad {
                accumulate(adj, *a, rows * cols_a, |ga| {
                    for r in 0..*rows {
                        for c in 0..*cols_a {
                            ga[r * cols_a + c] += go[r * total + c];
                        }
                    }
                });
            }
            if nodes[*b].needs_grad {
                accumulate(adj, *b, rows * cols_b, |gb| {
                    for r in 0..*rows {
                        for c in 0..*cols_b {
                            gb[r * cols_b + c] += go[r * total + cols_a + c];
                        }
                    }
                });
            }
            adj[*out] = Some(go);
        }
        TapeOp::Reshape { input, out } => {
            if !nodes[*input].needs_grad {
                return;
            }
            let Some(go) = adj[*out].take() else { return };
            accumulate(adj, *input, go.len(), |gi| {
                for i in 0..go.len() {
                    gi[i] += go[i];
                }
            });
            adj[*out] = Some(go);
        }
        TapeOp::TruncNormNll { points, sigmas, out, saved } => {
            let Some(go) = adj[*out].take() else { return };
            let g = upcast(go[0]);
            let grads: Vec<(f64, f64)> = saved
                .iter()
                .map(|s| {
                    let d = probdist::TruncatedNormal::new(s.mu, s.sigma, s.a, s.b)
                        .expect("parameters validated at forward time");
                    let (dmu, dsigma) = d
                        .nll_grad(s.label)
                        .expect("label validated at forward time");
                    // A floored scale contributes no gradient: the clamp
                    // is flat below the floor.
                    (g * dmu, if s.clamped { 0.0 } else { g * dsigma })
                })
                .collect();
            if nodes[*points].needs_grad {
                accumulate(adj, *points, grads.len(), |gp| {
                    for (i, (dmu, _)) in grads.iter().enumerate() {
                        gp[i] += cast(*dmu);
                    }
                });
            }
            if nodes[*sigmas].needs_grad {
                accumulate(adj, *sigmas, grads.len(), |gs| {
                    for (i, (_, dsigma)) in grads.iter().enumerate() {
                        gs[i] += cast(*dsigma);
                    }
                });
            }
            adj[*out] = Some(go);
        }
    }
}

/// Momentum buffers for [`sgd_step`], one per parameter, allocated on
/// first use and keyed by parameter order.
pub struct Velocity<E: Element> {
    buffers: Vec<Vec<E>>,
}

impl<E: Element> Velocity<E> {
    pub fn new() -> Self {
        Velocity { buffers: Vec::new() }
    }
}

impl<E: Element> Default for Velocity<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// One SGD-with-momentum update over `params`:
///
/// ```text
/// v     <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
/// ```
///
/// (classic L2 regularisation folded into the gradient). Every parameter
/// must carry a gradient from a preceding backward pass.
pub fn sgd_step<E: Element>(
    params: &[Tensor<E>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: &mut Velocity<E>,
) -> Result<()> {
    if velocity.buffers.is_empty() {
        velocity.buffers = params.iter().map(|p| vec![E::zero(); p.len()]).collect();
    }
    if velocity.buffers.len() != params.len() {
        return Err(Error::shape(format!(
            "velocity tracks {} parameters but {} were given",
            velocity.buffers.len(),
            params.len()
        )));
    }
    let (lr, mom, wd): (E, E, E) = (cast(lr), cast(momentum), cast(weight_decay));
    for (i, param) in params.iter().enumerate() {
        let grad = param.grad().ok_or_else(|| {
            Error::numeric(format!(
                "sgd_step: parameter {i} has no gradient; run backward first"
            ))
        })?;
        let mut inner = param.graph.inner.borrow_mut();
        let node = &mut inner.nodes[param.id];
        let v = &mut velocity.buffers[i];
        if v.len() != node.value.len() {
            return Err(Error::shape(format!(
                "velocity buffer {i} has length {} but parameter has {}",
                v.len(),
                node.value.len()
            )));
        }
        for j in 0..v.len() {
            v[j] = mom * v[j] + grad[j] + wd * node.value[j];
            node.value[j] -= lr * v[j];
        }
    }
    Ok(())
}
