//! Dense `f64` tensors, a reverse-mode tape, and the checked functional
//! forms of the primitives the model is built from.

mod tape;
mod tensor;

pub use tape::{AttentionContext, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Default LayerNorm stabilizer.
pub const LN_EPS: f64 = 1e-5;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
        return dim_err(format!("matmul {:?} x {:?}", a.shape(), b.shape()));
    }
    let data = tensor::gemm(a.data(), a.rows(), a.cols(), false, b.data(), b.rows(), b.cols(), false);
    Tensor::matrix(a.rows(), b.cols(), data)
}

/// Normalizes over the last axis (biased variance), no affine.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    if x.cols() == 0 {
        return dim_err("layer_norm over an empty axis");
    }
    Ok(tape::layer_norm_rows(x, eps).0)
}

/// Exact (erf) GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(tape::gelu)
}

/// Softmax of a 2-D tensor along `axis` (0 = down columns, 1 = along rows).
/// Higher-rank tensors normalize over the last axis.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    match (x.shape().len(), axis) {
        (2, 0) => Ok(tape::softmax_rows(&x.transpose()).transpose()),
        (n, a) if a + 1 == n || n == 1 && a == 0 => Ok(tape::softmax_rows(x)),
        _ => dim_err(format!("softmax axis {axis} for shape {:?}", x.shape())),
    }
}

/// `KL(p ‖ q) = Σ p log(p/q)`; terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return dim_err(format!("kl_divergence lengths {} vs {}", p.len(), q.len()));
    }
    let mass: f64 = p.iter().sum();
    if (mass - 1.0).abs() > 1e-9 || p.iter().any(|&x| x < 0.0) {
        return Err(Error::Contract(format!("KL target is not a distribution (sum {mass})")));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum())
}

/// Scaled dot-product attention with `heads` heads and learned input and
/// output projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub heads: usize,
}

/// Tape handles for the projections of a [`MultiHeadAttention`].
#[derive(Clone, Copy, Debug)]
pub struct MhaVars<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub wo: Var<'t>,
}

impl MultiHeadAttention {
    pub fn identity(dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        let eye = Tensor::eye(dim);
        Ok(Self {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye,
            heads,
        })
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        check_heads(dim, heads)?;
        let std = 1.0 / (dim as f64).sqrt();
        Ok(Self {
            wq: Tensor::randn(&[dim, dim], std, rng),
            wk: Tensor::randn(&[dim, dim], std, rng),
            wv: Tensor::randn(&[dim, dim], std, rng),
            wo: Tensor::randn(&[dim, dim], std, rng),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn vars<'t>(&self, tape: &'t Tape, trainable: bool) -> MhaVars<'t> {
        let leaf = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        MhaVars {
            wq: leaf(&self.wq),
            wk: leaf(&self.wk),
            wv: leaf(&self.wv),
            wo: leaf(&self.wo),
        }
    }

    /// `q: B×D`, `keys`/`values`: `M×D` → `B×D`.
    pub fn forward<'t>(&self, w: &MhaVars<'t>, q: Var<'t>, keys: Var<'t>, values: Var<'t>) -> Var<'t> {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qp = q.matmul(w.wq);
        let kp = keys.matmul(w.wk);
        let vp = values.matmul(w.wv);
        let heads: Vec<Var<'t>> = (0..self.heads)
            .map(|h| {
                let (lo, hi) = (h * dh, (h + 1) * dh);
                let scores = qp.slice_cols(lo, hi).matmul(kp.slice_cols(lo, hi).t()).scale(scale);
                scores.softmax_rows().matmul(vp.slice_cols(lo, hi))
            })
            .collect();
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            Var::concat_cols(&heads)
        };
        cat.matmul(w.wo)
    }

    /// Untracked evaluation.
    pub fn apply(&self, q: &Tensor, keys: &Tensor, values: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        if q.cols() != d || keys.cols() != d || values.cols() != d || keys.rows() != values.rows() {
            return dim_err(format!(
                "attention shapes q {:?} k {:?} v {:?} for dim {d}",
                q.shape(),
                keys.shape(),
                values.shape()
            ));
        }
        if keys.rows() == 0 {
            return dim_err("attention over zero keys");
        }
        let tape = Tape::new();
        let w = self.vars(&tape, false);
        let out = self.forward(&w, tape.constant(q), tape.constant(keys), tape.constant(values));
        let v = (*out.value()).clone();
        Ok(v)
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
    }
    Ok(())
}

/// Multi-head attention with identity projections.
pub fn multi_head_attention(q: &Tensor, keys: &Tensor, values: &Tensor, heads: usize) -> Result<Tensor> {
    MultiHeadAttention::identity(q.cols(), heads)?.apply(q, keys, values)
}
