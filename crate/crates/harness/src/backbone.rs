//! Frozen transformer-lite standing in for a pretrained backbone.
//!
//! Patch tokens attend only to each other, so their per-layer keys and
//! values do not depend on anything trainable. They are computed once per
//! split ([`PreparedSplit`]) and the class token, the only path prompts
//! touch, is run on the tape against that cached context.

use std::rc::Rc;

use resprompt_core::numerics::{gelu, layer_norm, matmul, AttentionContext, LN_EPS};
use resprompt_core::rng::stream;
use resprompt_core::{Tape, Tensor, Var};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::stream::{Split, SyntheticStream};

/// One pre-LN block: self-attention then a GELU MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    /// `D_in × D`
    pub embed: Tensor,
    pub embed_bias: Tensor,
    /// `S × D`
    pub positions: Tensor,
    pub cls: Tensor,
    pub blocks: Vec<Block>,
    pub heads: usize,
}

/// Tape constants for one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockVars<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub wo: Var<'t>,
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
}

fn add_bias(x: &mut Tensor, bias: &Tensor) {
    let c = x.cols();
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += bias.data()[i % c];
    }
}

impl Backbone {
    /// Seeded weights; the same `(cfg, seed)` always gives the same backbone.
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let (d, h) = (cfg.feature_dim, cfg.mlp_hidden);
        if d % cfg.backbone_heads != 0 {
            return Err(HarnessError::Config(format!(
                "feature_dim {d} not divisible by {} heads",
                cfg.backbone_heads
            )));
        }
        let rng = &mut stream(seed, "backbone");
        let sd = 1.0 / (d as f64).sqrt();
        let blocks = (0..cfg.layers)
            .map(|_| Block {
                wq: Tensor::randn(&[d, d], sd, rng),
                wk: Tensor::randn(&[d, d], sd, rng),
                wv: Tensor::randn(&[d, d], sd, rng),
                wo: Tensor::randn(&[d, d], sd, rng),
                w1: Tensor::randn(&[d, h], sd, rng),
                b1: Tensor::zeros(&[h]),
                w2: Tensor::randn(&[h, d], 1.0 / (h as f64).sqrt(), rng),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            embed: Tensor::randn(&[cfg.input_dim, d], 1.0 / (cfg.input_dim as f64).sqrt(), rng),
            embed_bias: Tensor::zeros(&[d]),
            positions: Tensor::randn(&[cfg.tokens, d], 0.1, rng),
            cls: Tensor::randn(&[d], 0.1, rng),
            blocks,
            heads: cfg.backbone_heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.embed.cols()
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_vars<'t>(&self, tape: &'t Tape) -> Vec<BlockVars<'t>> {
        self.blocks
            .iter()
            .map(|b| BlockVars {
                wq: tape.constant(&b.wq),
                wk: tape.constant(&b.wk),
                wv: tape.constant(&b.wv),
                wo: tape.constant(&b.wo),
                w1: tape.constant(&b.w1),
                b1: tape.constant(&b.b1),
                w2: tape.constant(&b.w2),
                b2: tape.constant(&b.b2),
            })
            .collect()
    }

    /// Runs the patch path of every sample in `split`.
    pub fn prepare(&self, split: &Split, tokens: usize) -> Result<PreparedSplit> {
        let n = split.len();
        let d = self.dim();
        let d_in = self.embed.rows();
        if split.x.cols() != tokens * d_in {
            return Err(HarnessError::Config(format!(
                "split rows have {} values, expected {tokens} × {d_in}",
                split.x.cols()
            )));
        }
        let raw = Tensor::matrix(n * tokens, d_in, split.x.data().to_vec())?;
        let mut x = matmul(&raw, &self.embed)?;
        add_bias(&mut x, &self.embed_bias);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v += self.positions.data()[i % (tokens * d)];
        }
        let mut cls0 = Tensor::zeros(&[n, d]);
        for s in 0..n {
            let row = cls0.row_mut(s);
            row.copy_from_slice(self.cls.data());
            for t in 0..tokens {
                for (o, v) in row.iter_mut().zip(x.row(s * tokens + t)) {
                    *o += v / tokens as f64;
                }
            }
        }
        let mut keys = Vec::with_capacity(self.layers());
        let mut values = Vec::with_capacity(self.layers());
        for (l, b) in self.blocks.iter().enumerate() {
            let h = layer_norm(&x, LN_EPS)?;
            let k = matmul(&h, &b.wk)?;
            let v = matmul(&h, &b.wv)?;
            if l + 1 < self.layers() {
                let q = matmul(&h, &b.wq)?;
                let a = self.patch_attention(&q, &k, &v, n, tokens);
                x.add_scaled(&matmul(&a, &b.wo)?, 1.0);
                let mut m = matmul(&layer_norm(&x, LN_EPS)?, &b.w1)?;
                add_bias(&mut m, &b.b1);
                let mut m = matmul(&gelu(&m), &b.w2)?;
                add_bias(&mut m, &b.b2);
                x.add_scaled(&m, 1.0);
            }
            keys.push(k.into_data());
            values.push(v.into_data());
        }
        Ok(PreparedSplit {
            cls0,
            keys,
            values,
            labels: split.labels.clone(),
            tokens,
            dim: d,
        })
    }

    fn patch_attention(&self, q: &Tensor, k: &Tensor, v: &Tensor, n: usize, s: usize) -> Tensor {
        let d = self.dim();
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(&[n * s, d]);
        let mut p = vec![0.0; s];
        for b in 0..n {
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..s {
                    let qi = &q.row(b * s + i)[cols.clone()];
                    for (j, pj) in p.iter_mut().enumerate() {
                        *pj = qi
                            .iter()
                            .zip(&k.row(b * s + j)[cols.clone()])
                            .map(|(a, c)| a * c)
                            .sum::<f64>()
                            * scale;
                    }
                    let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    p.iter_mut().for_each(|x| *x = (*x - m).exp());
                    let z: f64 = p.iter().sum();
                    let o = &mut out.row_mut(b * s + i)[cols.clone()];
                    for (j, pj) in p.iter().enumerate() {
                        for (oc, vc) in o.iter_mut().zip(&v.row(b * s + j)[cols.clone()]) {
                            *oc += pj / z * vc;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Cached patch-path outputs of one split.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    /// Layer-0 class token: the CLS embedding plus the mean patch embedding.
    pub cls0: Tensor,
    /// Per layer, `n × S × D` patch keys and values, row-major.
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub tokens: usize,
    pub dim: usize,
}

impl PreparedSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Patch context of the samples `idx` at `layer`.
    pub fn context(&self, layer: usize, idx: &[usize]) -> Rc<AttentionContext> {
        let w = self.tokens * self.dim;
        let gather = |src: &[f64]| {
            let mut out = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                out.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
            out
        };
        Rc::new(AttentionContext {
            keys: gather(&self.keys[layer]),
            values: gather(&self.values[layer]),
            batch: idx.len(),
            ctx_len: self.tokens,
            dim: self.dim,
        })
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct PreparedStage {
    pub train: PreparedSplit,
    pub val: PreparedSplit,
    pub test: PreparedSplit,
}

/// A stream pushed through the backbone's patch path, reusable by every
/// run that shares the `(stream, backbone)` pair.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub backbone: Backbone,
    pub stages: Vec<PreparedStage>,
}

impl PreparedData {
    pub fn new(backbone: Backbone, stream: &SyntheticStream) -> Result<Self> {
        let stages = stream
            .stages
            .iter()
            .map(|st| {
                Ok(PreparedStage {
                    train: backbone.prepare(&st.train, stream.tokens)?,
                    val: backbone.prepare(&st.val, stream.tokens)?,
                    test: backbone.prepare(&st.test, stream.tokens)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { backbone, stages })
    }

    /// Generates the stream and backbone for `(cfg, seed)`.
    pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let stream = crate::stream::generate_stream(cfg, seed)?;
        Self::new(Backbone::new(cfg, seed)?, &stream)
    }
}
