use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Tape, Tensor, Var, LN_EPS};

/// Per-layer adapter weights: the query enhancer (`W₁`, LayerNorm affine,
/// `W₂`) and the bottleneck projections in and out of prompt space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEnhancer {
    /// `3D × d_a`
    pub w1: Tensor,
    /// `d_a × D`
    pub w2: Tensor,
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    /// `D × d_a`
    pub w_down: Tensor,
    /// `d_a × D`
    pub w_up: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct EnhancerVars<'t> {
    pub w1: Var<'t>,
    pub w2: Var<'t>,
    pub ln_gain: Var<'t>,
    pub ln_bias: Var<'t>,
    pub w_down: Var<'t>,
    pub w_up: Var<'t>,
}

impl QueryEnhancer {
    pub fn random<R: Rng + ?Sized>(dim: usize, bottleneck: usize, rng: &mut R) -> Self {
        Self {
            w1: Tensor::randn(&[3 * dim, bottleneck], 1.0 / ((3 * dim) as f64).sqrt(), rng),
            w2: Tensor::randn(&[bottleneck, dim], 0.01, rng),
            ln_gain: Tensor::full(&[bottleneck], 1.0),
            ln_bias: Tensor::zeros(&[bottleneck]),
            w_down: Tensor::randn(&[dim, bottleneck], 1.0 / (dim as f64).sqrt(), rng),
            w_up: Tensor::randn(&[bottleneck, dim], 1.0 / (bottleneck as f64).sqrt(), rng),
        }
    }

    pub fn zeros(dim: usize, bottleneck: usize) -> Self {
        Self {
            w1: Tensor::zeros(&[3 * dim, bottleneck]),
            w2: Tensor::zeros(&[bottleneck, dim]),
            ln_gain: Tensor::full(&[bottleneck], 1.0),
            ln_bias: Tensor::zeros(&[bottleneck]),
            w_down: Tensor::zeros(&[dim, bottleneck]),
            w_up: Tensor::zeros(&[bottleneck, dim]),
        }
    }

    pub fn dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn bottleneck(&self) -> usize {
        self.w2.rows()
    }

    pub fn vars<'t>(&self, tape: &'t Tape, trainable: bool) -> EnhancerVars<'t> {
        let leaf = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        EnhancerVars {
            w1: leaf(&self.w1),
            w2: leaf(&self.w2),
            ln_gain: leaf(&self.ln_gain),
            ln_bias: leaf(&self.ln_bias),
            w_down: leaf(&self.w_down),
            w_up: leaf(&self.w_up),
        }
    }

    /// Named parameter slots, in a fixed order.
    pub fn params_mut(&mut self) -> [(&'static str, &mut Tensor); 6] {
        [
            ("w1", &mut self.w1),
            ("w2", &mut self.w2),
            ("ln_gain", &mut self.ln_gain),
            ("ln_bias", &mut self.ln_bias),
            ("w_down", &mut self.w_down),
            ("w_up", &mut self.w_up),
        ]
    }
}

/// `q̃ = q + GELU(LN([q; g; r]·W₁))·W₂` with a learned LayerNorm affine.
pub fn enhance_query<'t>(q: Var<'t>, g: Var<'t>, r: Var<'t>, enh: &EnhancerVars<'t>) -> Var<'t> {
    let c = Var::concat_cols(&[q, g, r]);
    let h = c
        .matmul(enh.w1)
        .layer_norm(LN_EPS)
        .mul_row(enh.ln_gain)
        .add_row(enh.ln_bias);
    q + h.gelu().matmul(enh.w2)
}

/// Untracked [`enhance_query`].
pub fn enhance_query_plain(q: &Tensor, g: &Tensor, r: &Tensor, enh: &QueryEnhancer) -> Tensor {
    let tape = Tape::new();
    let w = enh.vars(&tape, false);
    let out = enhance_query(tape.constant(q), tape.constant(g), tape.constant(r), &w);

    (*out.value()).clone()
}
