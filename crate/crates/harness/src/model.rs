//! Learnable state and the class-token forward pass.

use resprompt_core::numerics::{MhaVars, MultiHeadAttention, LN_EPS};
use resprompt_core::rng::stream;
use resprompt_core::routing::{
    enhance_query, inject, read_memory, route_layer, EnhancerVars, LayerRouting, MemoryBank, PoolVars, PromptPool,
    QueryEnhancer,
};
use resprompt_core::skp::{argmax, ClassifierHead};
use resprompt_core::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BlockVars, PreparedSplit};
use crate::config::{Component, ExperimentConfig};
use crate::error::Result;

/// Rows per untracked evaluation pass.
pub const EVAL_BATCH: usize = 250;

/// Everything trained or written during the experiment, minus the
/// optimizer. The backbone is not part of it: it is regenerated from the
/// seed and never changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub pool: PromptPool,
    pub bank: MemoryBank,
    /// Projections of the memory read, shared by every layer like the bank.
    pub memory_attn: MultiHeadAttention,
    /// One adapter per backbone layer; masked layers keep theirs unused.
    pub adapters: Vec<QueryEnhancer>,
    pub head: ClassifierHead,
}

impl ModelState {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let rng = &mut stream(seed, "model");
        let pool = PromptPool::random(cfg.pool_size, cfg.bottleneck, rng);
        let bank = MemoryBank::random(cfg.memory_slots, cfg.feature_dim, cfg.memory_momentum, rng)?;
        let memory_attn = MultiHeadAttention::random(cfg.feature_dim, cfg.memory_heads, rng)?;
        let adapters = (0..cfg.layers)
            .map(|_| QueryEnhancer::random(cfg.feature_dim, cfg.bottleneck, rng))
            .collect();
        let head = ClassifierHead::random(cfg.classes, cfg.feature_dim, rng);
        Ok(Self {
            pool,
            bank,
            memory_attn,
            adapters,
            head,
        })
    }

    /// Places the routing parameters on the tape. With `trainable` false
    /// everything is a constant.
    pub fn vars<'t>(&self, tape: &'t Tape, trainable: bool) -> ModelVars<'t> {
        ModelVars {
            pool: self.pool.vars(tape, trainable),
            attn: self.memory_attn.vars(tape, trainable),
            adapters: self.adapters.iter().map(|a| a.vars(tape, trainable)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars<'t> {
    pub pool: PoolVars<'t>,
    pub attn: MhaVars<'t>,
    pub adapters: Vec<EnhancerVars<'t>>,
}

/// Forward-pass switches taken from the config.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteOptions {
    pub alpha: f64,
    pub lambda_r: f64,
    pub enhance: bool,
    pub inject: Vec<bool>,
}

impl RouteOptions {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            alpha: cfg.alpha,
            lambda_r: cfg.lambda_r,
            enhance: !cfg.dropped(Component::QueryEnhancer),
            inject: (0..cfg.layers).map(|l| cfg.injects(l)).collect(),
        }
    }

    pub fn injected_layers(&self) -> Vec<usize> {
        self.inject
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(l, _)| l)
            .collect()
    }
}

/// Routing state of one injected layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace<'t> {
    pub layer: usize,
    /// Raw class-token query.
    pub query: Var<'t>,
    pub enhanced: Var<'t>,
    pub routing: LayerRouting<'t>,
}

#[derive(Clone, Debug)]
pub struct Forward<'t> {
    /// Final LayerNorm of the class token, `B × D`.
    pub features: Var<'t>,
    pub traces: Vec<LayerTrace<'t>>,
}

/// Class-token pass for the samples `idx` of `split`.
#[allow(clippy::too_many_arguments)]
pub fn forward<'t>(
    tape: &'t Tape,
    model: &ModelState,
    vars: &ModelVars<'t>,
    backbone: &Backbone,
    blocks: &[BlockVars<'t>],
    split: &PreparedSplit,
    idx: &[usize],
    opts: &RouteOptions,
) -> Forward<'t> {
    let g = tape.constant_owned(split.cls0.gather_rows(idx));
    let mut cls = g;
    let mut traces = Vec::new();
    for (l, b) in blocks.iter().enumerate() {
        if opts.inject[l] {
            let adapter = &vars.adapters[l];
            let q = cls;
            let enhanced = if opts.enhance {
                let r = read_memory(q, &model.bank, &model.memory_attn, &vars.attn);
                enhance_query(q, g, r, adapter)
            } else {
                q
            };
            let routing = route_layer(enhanced.matmul(adapter.w_down), &vars.pool, opts.alpha, opts.lambda_r);
            cls = inject(cls, routing.p_out, adapter.w_up);
            traces.push(LayerTrace {
                layer: l,
                query: q,
                enhanced,
                routing,
            });
        }
        let h = cls.layer_norm(LN_EPS);
        let ctx = split.context(l, idx);
        let att = h
            .matmul(b.wq)
            .context_attention(h.matmul(b.wk), h.matmul(b.wv), ctx, backbone.heads);
        cls = cls + att.matmul(b.wo);
        let m = cls
            .layer_norm(LN_EPS)
            .matmul(b.w1)
            .add_row(b.b1)
            .gelu()
            .matmul(b.w2)
            .add_row(b.b2);
        cls = cls + m;
    }
    Forward {
        features: cls.layer_norm(LN_EPS),
        traces,
    }
}

/// Per-sample pool usage of one layer as a `B × N` matrix over pool
/// positions. Split routing puts half the mass on each subset so every row
/// still sums to one.
pub fn usage_matrix(routing: &LayerRouting<'_>, pool: &PromptPool) -> Tensor {
    let wa = routing.weights_active.value();
    let b = wa.rows();
    let mut out = Tensor::zeros(&[b, pool.len()]);
    let scale = if routing.weights_frozen.is_some() { 0.5 } else { 1.0 };
    for r in 0..b {
        let row = out.row_mut(r);
        for (k, &i) in pool.active().iter().enumerate() {
            row[i] = scale * wa.at(r, k);
        }
    }
    if let Some(wf) = routing.weights_frozen {
        let wf = wf.value();
        for r in 0..b {
            let row = out.row_mut(r);
            for (k, &i) in pool.frozen().iter().enumerate() {
                row[i] = 0.5 * wf.at(r, k);
            }
        }
    }
    out
}

/// Untracked output of one evaluation batch.
#[derive(Clone, Debug)]
pub struct EvalBatch {
    pub features: Tensor,
    /// Per injected layer, `B × N` usage.
    pub usage: Vec<Tensor>,
}

pub fn eval_batch(
    model: &ModelState,
    backbone: &Backbone,
    split: &PreparedSplit,
    idx: &[usize],
    opts: &RouteOptions,
) -> EvalBatch {
    let tape = Tape::new();
    let vars = model.vars(&tape, false);
    let blocks = backbone.block_vars(&tape);
    let fwd = forward(&tape, model, &vars, backbone, &blocks, split, idx, opts);
    EvalBatch {
        features: (*fwd.features.value()).clone(),
        usage: fwd
            .traces
            .iter()
            .map(|t| usage_matrix(&t.routing, &model.pool))
            .collect(),
    }
}

/// Features of every sample of `split`, in order.
pub fn features(model: &ModelState, backbone: &Backbone, split: &PreparedSplit, opts: &RouteOptions) -> Result<Tensor> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut out: Option<Tensor> = None;
    for chunk in idx.chunks(EVAL_BATCH) {
        let f = eval_batch(model, backbone, split, chunk, opts).features;
        match out.as_mut() {
            Some(o) => o.append_rows(&f)?,
            None => out = Some(f),
        }
    }
    Ok(out.unwrap_or_else(|| Tensor::zeros(&[0, backbone.dim()])))
}

/// Argmax predictions of `head` on `features`.
pub fn predict(head: &ClassifierHead, features: &Tensor) -> Result<Vec<usize>> {
    let z = head.logits(features)?;
    Ok((0..z.rows()).map(|r| argmax(z.row(r))).collect())
}
