//! Wengert-list reverse-mode differentiation over 2-D tensors.
//!
//! Every primitive appends one node holding its value and the indices of
//! its inputs. `backward` walks the list from the loss to the front, which
//! is a reverse topological order because inputs always precede outputs.
//! Nodes are tracked only when they (transitively) depend on a parameter
//! leaf; constants never receive gradients.
//!
//! Shape mismatches inside a tape expression are programming errors and
//! panic with the offending shapes. The checked functional API lives in
//! [`crate::numerics`].

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use crate::entmax;
use crate::error::{Error, Result};

/// Per-sample keys and values a query attends to besides its own key, as used
/// by a class token whose context tokens are fixed.
#[derive(Debug, Clone)]
pub struct AttentionContext {
    /// `batch × ctx_len × dim`, row-major.
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub batch: usize,
    pub ctx_len: usize,
    pub dim: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    MulScalar(usize, usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    SumCols(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    NormalizeRows {
        x: usize,
        norms: Vec<f64>,
        eps: f64,
    },
    RowNorms(usize),
    Entmax {
        x: usize,
        alpha: f64,
    },
    Transpose(usize),
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ContextAttention {
        q: usize,
        k: usize,
        v: usize,
        ctx: Rc<AttentionContext>,
        probs: Vec<f64>,
        heads: usize,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Recording of primitive applications for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients of a scalar with respect to every tracked node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for constants and for tracked nodes the loss does not reach.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient or zeros shaped like `v`.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.clone(), Op::Leaf, false)
    }

    pub fn constant_owned(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        if !nodes[loss.id].tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].tracked {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_scaled(&g, 1.0),
        slot @ None => *slot = Some(g),
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &node.value;
    let val = |i: usize| &nodes[i].value;
    let want = |i: usize| nodes[i].tracked;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if want(*a) {
                let d = gemm(
                    g.data(),
                    g.rows(),
                    g.cols(),
                    false,
                    bv.data(),
                    bv.rows(),
                    bv.cols(),
                    true,
                );
                accumulate(nodes, grads, *a, like(av, d));
            }
            if want(*b) {
                let d = gemm(
                    av.data(),
                    av.rows(),
                    av.cols(),
                    true,
                    g.data(),
                    g.rows(),
                    g.cols(),
                    false,
                );
                accumulate(nodes, grads, *b, like(bv, d));
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            if want(*b) {
                accumulate(nodes, grads, *b, g.map(|x| -x));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if want(*a) {
                let d = g.data().iter().zip(bv.data()).map(|(g, b)| g * b).collect();
                accumulate(nodes, grads, *a, like(av, d));
            }
            if want(*b) {
                let d = g.data().iter().zip(av.data()).map(|(g, a)| g * a).collect();
                accumulate(nodes, grads, *b, like(bv, d));
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if want(*a) {
                let d = g.data().iter().zip(bv.data()).map(|(g, b)| g / b).collect();
                accumulate(nodes, grads, *a, like(av, d));
            }
            if want(*b) {
                let d = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(g, (a, b))| -g * a / (b * b))
                    .collect();
                accumulate(nodes, grads, *b, like(bv, d));
            }
        }
        Op::AddRow(a, r) => {
            accumulate(nodes, grads, *a, g.clone());
            if want(*r) {
                let d = col_sums(g);
                accumulate(nodes, grads, *r, like(val(*r), d));
            }
        }
        Op::MulRow(a, r) => {
            let (av, rv) = (val(*a), val(*r));
            let c = g.cols();
            if want(*a) {
                let d = g.data().iter().enumerate().map(|(i, g)| g * rv.data()[i % c]).collect();
                accumulate(nodes, grads, *a, like(av, d));
            }
            if want(*r) {
                let mut d = vec![0.0; c];
                for (i, (g, a)) in g.data().iter().zip(av.data()).enumerate() {
                    d[i % c] += g * a;
                }
                accumulate(nodes, grads, *r, like(rv, d));
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.map(|x| x * s)),
        Op::AddConst(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::MulScalar(a, s) => {
            let (av, sv) = (val(*a), val(*s));
            if want(*a) {
                let k = sv.item();
                accumulate(nodes, grads, *a, g.map(|x| x * k));
            }
            if want(*s) {
                let d: f64 = g.data().iter().zip(av.data()).map(|(g, a)| g * a).sum();
                accumulate(nodes, grads, *s, like(sv, vec![d]));
            }
        }
        Op::Exp(a) => {
            let d = g.data().iter().zip(out.data()).map(|(g, y)| g * y).collect();
            accumulate(nodes, grads, *a, like(val(*a), d));
        }
        Op::Log(a) => {
            let d = g.data().iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
            accumulate(nodes, grads, *a, like(val(*a), d));
        }
        Op::Abs(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(g, x)| {
                    if *x > 0.0 {
                        *g
                    } else if *x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(nodes, grads, *a, like(val(*a), d));
        }
        Op::Sum(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, Tensor::full(av.shape(), g.item()));
        }
        Op::Mean(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, Tensor::full(av.shape(), g.item() / av.len() as f64));
        }
        Op::MeanRows(a) => {
            let av = val(*a);
            let (r, c) = (av.rows(), av.cols());
            let d = (0..r * c).map(|i| g.data()[i % c] / r as f64).collect();
            accumulate(nodes, grads, *a, like(av, d));
        }
        Op::SumCols(a) => {
            let av = val(*a);
            let c = av.cols();
            let d = (0..av.len()).map(|i| g.data()[i / c]).collect();
            accumulate(nodes, grads, *a, like(av, d));
        }
        Op::Gelu(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(g, &x)| g * gelu_grad(x))
                .collect();
            accumulate(nodes, grads, *a, like(val(*a), d));
        }
        Op::LayerNorm { x, inv_std } => {
            let c = out.cols();
            let mut d = vec![0.0; out.len()];
            for (r, inv) in inv_std.iter().enumerate() {
                let y = out.row(r);
                let gy = g.row(r);
                let mean_g = gy.iter().sum::<f64>() / c as f64;
                let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    d[r * c + j] = inv * (gy[j] - mean_g - y[j] * mean_gy);
                }
            }
            accumulate(nodes, grads, *x, like(val(*x), d));
        }
        Op::SoftmaxRows(a) => {
            let c = out.cols();
            let mut d = vec![0.0; out.len()];
            for r in 0..out.rows() {
                let y = out.row(r);
                let gy = g.row(r);
                let dot: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    d[r * c + j] = y[j] * (gy[j] - dot);
                }
            }
            accumulate(nodes, grads, *a, like(val(*a), d));
        }
        Op::LogSoftmaxRows(a) => {
            let c = out.cols();
            let mut d = vec![0.0; out.len()];
            for r in 0..out.rows() {
                let y = out.row(r);
                let gy = g.row(r);
                let total: f64 = gy.iter().sum();
                for j in 0..c {
                    d[r * c + j] = gy[j] - y[j].exp() * total;
                }
            }
            accumulate(nodes, grads, *a, like(val(*a), d));
        }
        Op::NormalizeRows { x, norms, eps } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut d = vec![0.0; xv.len()];
            for (r, &n) in norms.iter().enumerate() {
                let xr = xv.row(r);
                let gr = g.row(r);
                let den = n + eps;
                let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                let k = if n > 0.0 { dot / (n * den * den) } else { 0.0 };
                for j in 0..c {
                    d[r * c + j] = gr[j] / den - xr[j] * k;
                }
            }
            accumulate(nodes, grads, *x, like(xv, d));
        }
        Op::RowNorms(x) => {
            let xv = val(*x);
            let c = xv.cols();
            let mut d = vec![0.0; xv.len()];
            for r in 0..xv.rows() {
                let n = out.data()[r];
                if n > 0.0 {
                    for j in 0..c {
                        d[r * c + j] = g.data()[r] * xv.at(r, j) / n;
                    }
                }
            }
            accumulate(nodes, grads, *x, like(xv, d));
        }
        Op::Entmax { x, alpha } => {
            let c = out.cols();
            let mut d = Vec::with_capacity(out.len());
            for r in 0..out.rows() {
                d.extend(entmax::vjp_row(out.row(r), g.row(r), *alpha));
            }
            debug_assert_eq!(d.len(), out.rows() * c);
            accumulate(nodes, grads, *x, like(val(*x), d));
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
        Op::ConcatCols(parts) => {
            let c = out.cols();
            let mut off = 0;
            for &p in parts {
                let pv = val(p);
                let pc = pv.cols();
                if want(p) {
                    let mut d = Vec::with_capacity(pv.len());
                    for r in 0..out.rows() {
                        d.extend_from_slice(&g.data()[r * c + off..r * c + off + pc]);
                    }
                    accumulate(nodes, grads, p, like(pv, d));
                }
                off += pc;
            }
        }
        Op::SliceCols { x, start } => {
            let xv = val(*x);
            let (c, w) = (xv.cols(), out.cols());
            let mut d = vec![0.0; xv.len()];
            for r in 0..out.rows() {
                d[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
            }
            accumulate(nodes, grads, *x, like(xv, d));
        }
        Op::GatherRows { x, idx } => {
            let xv = val(*x);
            let c = xv.cols();
            let mut d = vec![0.0; xv.len()];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..c {
                    d[i * c + j] += g.data()[k * c + j];
                }
            }
            accumulate(nodes, grads, *x, like(xv, d));
        }
        Op::ContextAttention {
            q,
            k,
            v,
            ctx,
            probs,
            heads,
        } => {
            let (dq, dk, dv) = context_attention_backward(
                val(*q).data(),
                val(*k).data(),
                val(*v).data(),
                ctx,
                probs,
                *heads,
                g.data(),
            );
            accumulate(nodes, grads, *q, like(val(*q), dq));
            accumulate(nodes, grads, *k, like(val(*k), dk));
            accumulate(nodes, grads, *v, like(val(*v), dv));
        }
    }
}

fn col_sums(g: &Tensor) -> Vec<f64> {
    let c = g.cols();
    let mut d = vec![0.0; c];
    for (i, x) in g.data().iter().enumerate() {
        d[i % c] += x;
    }
    d
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn layer_norm_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = if var + eps > 0.0 { 1.0 / (var + eps).sqrt() } else { 0.0 };
        out.extend(row.iter().map(|v| (v - mean) * inv));
        inv_std.push(inv);
    }
    (like(x, out), inv_std)
}

pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    like(x, out)
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    like(x, out)
}

fn context_attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    ctx: &AttentionContext,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (b, s, d) = (ctx.batch, ctx.ctx_len, ctx.dim);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; b * d];
    let mut probs = vec![0.0; b * heads * (s + 1)];
    let mut scores = vec![0.0; s + 1];
    for bi in 0..b {
        let qb = &q[bi * d..(bi + 1) * d];
        let kb = &k[bi * d..(bi + 1) * d];
        let vb = &v[bi * d..(bi + 1) * d];
        let ck = &ctx.keys[bi * s * d..(bi + 1) * s * d];
        let cv = &ctx.values[bi * s * d..(bi + 1) * s * d];
        for h in 0..heads {
            let hs = h * dh..(h + 1) * dh;
            scores[0] = dot(&qb[hs.clone()], &kb[hs.clone()]) * scale;
            for t in 0..s {
                scores[t + 1] = dot(&qb[hs.clone()], &ck[t * d + h * dh..t * d + (h + 1) * dh]) * scale;
            }
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for sc in scores.iter_mut() {
                *sc = (*sc - m).exp();
                z += *sc;
            }
            let p = &mut probs[(bi * heads + h) * (s + 1)..(bi * heads + h + 1) * (s + 1)];
            for (pi, sc) in p.iter_mut().zip(&scores) {
                *pi = sc / z;
            }
            let o = &mut out[bi * d + h * dh..bi * d + (h + 1) * dh];
            for j in 0..dh {
                o[j] = p[0] * vb[h * dh + j];
            }
            for t in 0..s {
                let row = &cv[t * d + h * dh..t * d + (h + 1) * dh];
                for j in 0..dh {
                    o[j] += p[t + 1] * row[j];
                }
            }
        }
    }
    (out, probs)
}

fn context_attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    ctx: &AttentionContext,
    probs: &[f64],
    heads: usize,
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, s, d) = (ctx.batch, ctx.ctx_len, ctx.dim);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; b * d];
    let mut dk = vec![0.0; b * d];
    let mut dv = vec![0.0; b * d];
    let mut dp = vec![0.0; s + 1];
    for bi in 0..b {
        let ck = &ctx.keys[bi * s * d..(bi + 1) * s * d];
        let cv = &ctx.values[bi * s * d..(bi + 1) * s * d];
        for h in 0..heads {
            let lo = bi * d + h * dh;
            let gh = &g[lo..lo + dh];
            let p = &probs[(bi * heads + h) * (s + 1)..(bi * heads + h + 1) * (s + 1)];
            dp[0] = dot(gh, &v[lo..lo + dh]);
            for t in 0..s {
                dp[t + 1] = dot(gh, &cv[t * d + h * dh..t * d + (h + 1) * dh]);
            }
            for j in 0..dh {
                dv[lo + j] = p[0] * gh[j];
            }
            let pdp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let ds0 = p[0] * (dp[0] - pdp) * scale;
            for j in 0..dh {
                dq[lo + j] += ds0 * k[lo + j];
                dk[lo + j] = ds0 * q[lo + j];
            }
            for t in 0..s {
                let dst = p[t + 1] * (dp[t + 1] - pdp) * scale;
                let row = &ck[t * d + h * dh..t * d + (h + 1) * dh];
                for j in 0..dh {
                    dq[lo + j] += dst * row[j];
                }
            }
        }
    }
    (dq, dk, dv)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.is_tracked())
    }

    fn binary(&self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let tracked = self.is_tracked() || other.is_tracked();
        self.tape.push(value, op, tracked)
    }

    fn zip_same(&self, other: Var<'t>, what: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
        like(&a, a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect())
    }

    /// Detached copy: same value, no gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.push((*self.value()).clone(), Op::Leaf, false)
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert!(
            a.shape().len() == 2 && b.shape().len() == 2 && a.cols() == b.rows(),
            "matmul: {:?} x {:?}",
            a.shape(),
            b.shape()
        );
        let data = gemm(a.data(), a.rows(), a.cols(), false, b.data(), b.rows(), b.cols(), false);
        let value = Tensor::new(vec![a.rows(), b.cols()], data).expect("matmul shape");
        self.binary(other, value, Op::MatMul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Var<'t> {
        let v = self.zip_same(other, "div", |a, b| a / b);
        self.binary(other, v, Op::Div(self.id, other.id))
    }

    /// Adds a length-`cols` row to every row.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        let (a, r) = (self.value(), row.value());
        let c = a.cols();
        assert_eq!(r.len(), c, "add_row: {:?} + {:?}", a.shape(), r.shape());
        let data = a.data().iter().enumerate().map(|(i, x)| x + r.data()[i % c]).collect();
        self.binary(row, like(&a, data), Op::AddRow(self.id, row.id))
    }

    /// Multiplies every row elementwise by a length-`cols` row.
    pub fn mul_row(&self, row: Var<'t>) -> Var<'t> {
        let (a, r) = (self.value(), row.value());
        let c = a.cols();
        assert_eq!(r.len(), c, "mul_row: {:?} * {:?}", a.shape(), r.shape());
        let data = a.data().iter().enumerate().map(|(i, x)| x * r.data()[i % c]).collect();
        self.binary(row, like(&a, data), Op::MulRow(self.id, row.id))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_const(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v, Op::AddConst(self.id))
    }

    /// Multiplies by a one-element var.
    pub fn mul_scalar(&self, s: Var<'t>) -> Var<'t> {
        let sv = s.value();
        assert!(sv.is_scalar(), "mul_scalar: {:?}", sv.shape());
        let k = sv.item();
        let v = self.value().map(|x| x * k);
        self.binary(s, v, Op::MulScalar(self.id, s.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let a = self.value();
        let v = Tensor::scalar(a.sum() / a.len() as f64);
        self.unary(v, Op::Mean(self.id))
    }

    /// Column means: `r×c → 1×c`.
    pub fn mean_rows(&self) -> Var<'t> {
        let a = self.value();
        let r = a.rows() as f64;
        let v = Tensor::row_vector(col_sums(&a).into_iter().map(|x| x / r).collect());
        self.unary(v, Op::MeanRows(self.id))
    }

    /// Row sums: `r×c → r×1`.
    pub fn sum_cols(&self) -> Var<'t> {
        let a = self.value();
        let data: Vec<f64> = (0..a.rows()).map(|r| a.row(r).iter().sum()).collect();
        let v = Tensor::new(vec![a.rows(), 1], data).expect("sum_cols");
        self.unary(v, Op::SumCols(self.id))
    }

    pub fn gelu(&self) -> Var<'t> {
        let v = self.value().map(gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    /// Normalizes each row to zero mean and unit biased variance.
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let (v, inv_std) = layer_norm_rows(&self.value(), eps);
        self.unary(v, Op::LayerNorm { x: self.id, inv_std })
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let v = softmax_rows(&self.value());
        self.unary(v, Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        let v = log_softmax_rows(&self.value());
        self.unary(v, Op::LogSoftmaxRows(self.id))
    }

    /// `x / (‖x‖₂ + eps)` per row.
    pub fn normalize_rows(&self, eps: f64) -> Var<'t> {
        let a = self.value();
        let c = a.cols();
        let mut data = Vec::with_capacity(a.len());
        let mut norms = Vec::with_capacity(a.rows());
        for r in 0..a.rows() {
            let row = a.row(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(row.iter().map(|x| x / (n + eps)));
            norms.push(n);
        }
        debug_assert_eq!(data.len(), a.rows() * c);
        self.unary(like(&a, data), Op::NormalizeRows { x: self.id, norms, eps })
    }

    /// Euclidean norm of each row: `r×c → r×1`.
    pub fn row_norms(&self) -> Var<'t> {
        let a = self.value();
        let data: Vec<f64> = (0..a.rows())
            .map(|r| a.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let v = Tensor::new(vec![a.rows(), 1], data).expect("row_norms");
        self.unary(v, Op::RowNorms(self.id))
    }

    /// Row-wise α-entmax.
    pub fn entmax_rows(&self, alpha: f64) -> Var<'t> {
        let a = self.value();
        let mut data = Vec::with_capacity(a.len());
        for r in 0..a.rows() {
            let w = entmax::entmax(a.row(r), alpha).expect("entmax_rows on finite logits");
            data.extend(w.weights);
        }
        self.unary(like(&a, data), Op::Entmax { x: self.id, alpha })
    }

    pub fn t(&self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        let first = parts.first().expect("concat of nothing");
        let tape = first.tape;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let rows = vals[0].rows();
        assert!(vals.iter().all(|v| v.rows() == rows), "concat_cols: row mismatch");
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let tracked = parts.iter().any(Var::is_tracked);
        let value = Tensor::new(vec![rows, cols], data).expect("concat shape");
        tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), tracked)
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Var<'t> {
        let a = self.value();
        assert!(
            start <= end && end <= a.cols(),
            "slice_cols {start}..{end} of {:?}",
            a.shape()
        );
        let mut data = Vec::with_capacity(a.rows() * (end - start));
        for r in 0..a.rows() {
            data.extend_from_slice(&a.row(r)[start..end]);
        }
        let v = Tensor::new(vec![a.rows(), end - start], data).expect("slice shape");
        self.unary(v, Op::SliceCols { x: self.id, start })
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Var<'t> {
        let a = self.value();
        assert!(idx.iter().all(|&i| i < a.rows()), "gather_rows index out of range");
        let v = a.gather_rows(idx);
        self.unary(
            v,
            Op::GatherRows {
                x: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    /// Multi-head attention of each query row over its own key/value row
    /// followed by the per-sample context in `ctx`.
    pub fn context_attention(&self, k: Var<'t>, v: Var<'t>, ctx: Rc<AttentionContext>, heads: usize) -> Var<'t> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        assert_eq!(qv.shape(), &[ctx.batch, ctx.dim], "context_attention query shape");
        assert_eq!(kv.shape(), qv.shape());
        assert_eq!(vv.shape(), qv.shape());
        assert_eq!(ctx.dim % heads, 0, "context_attention: dim % heads");
        let (out, probs) = context_attention_forward(qv.data(), kv.data(), vv.data(), &ctx, heads);
        let tracked = self.is_tracked() || k.is_tracked() || v.is_tracked();
        let value = like(&qv, out);
        self.tape.push(
            value,
            Op::ContextAttention {
                q: self.id,
                k: k.id,
                v: v.id,
                ctx,
                probs,
                heads,
            },
            tracked,
        )
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.zip_same(rhs, "add", |a, b| a + b);
        self.binary(rhs, v, Op::Add(self.id, rhs.id))
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.zip_same(rhs, "sub", |a, b| a - b);
        self.binary(rhs, v, Op::Sub(self.id, rhs.id))
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        let v = self.zip_same(rhs, "mul", |a, b| a * b);
        self.binary(rhs, v, Op::Mul(self.id, rhs.id))
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
