use rand::Rng;
use serde::{Deserialize, Serialize};

use super::COS_EPS;
use crate::entmax::{self, SparseWeights};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Key/value prompt rows with a frozen/active index partition.
///
/// Before the first expansion every row is active and the frozen set is
/// empty. Expansion moves the whole active set to the frozen set and appends
/// fresh active rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPool {
    pub keys: Tensor,
    pub values: Tensor,
    frozen: Vec<usize>,
    active: Vec<usize>,
}

/// Standard deviation of freshly appended prompt values; keeps new residuals
/// near zero.
pub const NEW_VALUE_STD: f64 = 1e-4;
/// Standard deviation of the initial (first-stage) prompt values.
pub const INITIAL_VALUE_STD: f64 = 0.02;

impl PromptPool {
    pub fn new(keys: Tensor, values: Tensor) -> Result<Self> {
        if keys.shape() != values.shape() || keys.shape().len() != 2 {
            return dim_err(format!("pool keys {:?} vs values {:?}", keys.shape(), values.shape()));
        }
        let active = (0..keys.rows()).collect();
        Ok(Self {
            keys,
            values,
            frozen: Vec::new(),
            active,
        })
    }

    pub fn random<R: Rng + ?Sized>(size: usize, bottleneck: usize, rng: &mut R) -> Self {
        let key_std = 1.0 / (bottleneck as f64).sqrt();
        let keys = Tensor::randn(&[size, bottleneck], key_std, rng);
        let values = Tensor::randn(&[size, bottleneck], INITIAL_VALUE_STD, rng);
        Self::new(keys, values).expect("shapes agree")
    }

    /// Rebuilds a pool from stored parts, validating the partition.
    pub fn from_parts(keys: Tensor, values: Tensor, frozen: Vec<usize>, active: Vec<usize>) -> Result<Self> {
        let mut pool = Self::new(keys, values)?;
        let n = pool.len();
        let mut seen = vec![false; n];
        for &i in frozen.iter().chain(&active) {
            if i >= n {
                return Err(Error::Index { index: i, len: n });
            }
            if seen[i] {
                return Err(Error::Contract(format!("prompt {i} is both frozen and active")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) || active.is_empty() {
            return Err(Error::Contract("frozen and active sets must cover the pool".into()));
        }
        pool.frozen = frozen;
        pool.active = active;
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bottleneck(&self) -> usize {
        self.keys.cols()
    }

    pub fn frozen(&self) -> &[usize] {
        &self.frozen
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// True once a frozen partition exists, i.e. routing runs per subset.
    pub fn is_partitioned(&self) -> bool {
        !self.frozen.is_empty()
    }

    /// `true` for rows that may be updated.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.len()];
        for &i in &self.active {
            m[i] = true;
        }
        m
    }

    /// Freezes the current active rows and appends `count` fresh rows that
    /// become the new active set.
    pub fn expand<R: Rng + ?Sized>(&mut self, count: usize, rng: &mut R) -> Result<()> {
        if count == 0 {
            return Err(Error::Contract("pool expansion by zero prompts".into()));
        }
        let d = self.bottleneck();
        let n = self.len();
        let keys = Tensor::randn(&[count, d], 1.0 / (d as f64).sqrt(), rng);
        let values = Tensor::randn(&[count, d], NEW_VALUE_STD, rng);
        self.keys.append_rows(&keys)?;
        self.values.append_rows(&values)?;
        self.frozen.append(&mut self.active);
        self.frozen.sort_unstable();
        self.active = (n..n + count).collect();
        Ok(())
    }

    /// Places the tape: frozen rows as constants, active rows as parameters
    /// (or constants when `trainable` is false).
    pub fn vars<'t>(&self, tape: &'t Tape, trainable: bool) -> PoolVars<'t> {
        let leaf = |t: Tensor| {
            if trainable {
                tape.param(&t)
            } else {
                tape.constant_owned(t)
            }
        };
        let frozen = if self.frozen.is_empty() {
            None
        } else {
            Some((
                tape.constant_owned(self.keys.gather_rows(&self.frozen)),
                tape.constant_owned(self.values.gather_rows(&self.frozen)),
            ))
        };
        PoolVars {
            frozen,
            active_keys: leaf(self.keys.gather_rows(&self.active)),
            active_values: leaf(self.values.gather_rows(&self.active)),
        }
    }

    /// Scatters an active-subset gradient back to full pool shape; frozen
    /// rows get exact zeros.
    pub fn full_gradient(&self, active_grad: &Tensor) -> Tensor {
        let mut g = Tensor::zeros(self.keys.shape());
        for (k, &i) in self.active.iter().enumerate() {
            g.row_mut(i).copy_from_slice(active_grad.row(k));
        }
        g
    }
}

/// Tape handles for a [`PromptPool`].
#[derive(Clone, Copy, Debug)]
pub struct PoolVars<'t> {
    /// `(keys, values)` of the frozen rows, always constants.
    pub frozen: Option<(Var<'t>, Var<'t>)>,
    pub active_keys: Var<'t>,
    pub active_values: Var<'t>,
}

/// Result of routing over one prompt subset.
#[derive(Clone, Copy, Debug)]
pub struct Routed<'t> {
    /// `B × |subset|` entmax weights.
    pub weights: Var<'t>,
    /// `B × d_a` weighted prompt values.
    pub prompt: Var<'t>,
}

/// Cosine logits between the projected query `z` and the subset keys,
/// α-entmax per row, and the weighted sum of the subset values.
pub fn route<'t>(z: Var<'t>, keys: Var<'t>, values: Var<'t>, alpha: f64) -> Routed<'t> {
    let logits = z.normalize_rows(COS_EPS).matmul(keys.normalize_rows(COS_EPS).t());
    let weights = logits.entmax_rows(alpha);
    Routed {
        weights,
        prompt: weights.matmul(values),
    }
}

/// Routes the enhanced queries over `subset` of the pool.
///
/// Returns one [`SparseWeights`] per sample and the `B × d_a` prompt.
pub fn route_subset(
    q_enh: &Tensor,
    pool: &PromptPool,
    subset: &[usize],
    w_down: &Tensor,
    alpha: f64,
) -> Result<(Vec<SparseWeights>, Tensor)> {
    if subset.is_empty() {
        return Err(Error::Contract("routing over an empty prompt subset".into()));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= pool.len()) {
        return Err(Error::Index {
            index: bad,
            len: pool.len(),
        });
    }
    if q_enh.cols() != w_down.rows() || w_down.cols() != pool.bottleneck() {
        return dim_err(format!(
            "route_subset: query {:?}, w_down {:?}, pool d_a {}",
            q_enh.shape(),
            w_down.shape(),
            pool.bottleneck()
        ));
    }
    let tape = Tape::new();
    let z = tape.constant(q_enh).matmul(tape.constant(w_down));
    let keys = tape.constant_owned(pool.keys.gather_rows(subset));
    let values = tape.constant_owned(pool.values.gather_rows(subset));
    let routed = route(z, keys, values, alpha);
    let logits = z
        .normalize_rows(COS_EPS)
        .matmul(keys.normalize_rows(COS_EPS).t())
        .value();
    let per_sample = (0..logits.rows())
        .map(|r| entmax::entmax(logits.row(r), alpha))
        .collect::<Result<Vec<_>>>()?;
    let prompt = (*routed.prompt.value()).clone();
    Ok((per_sample, prompt))
}

/// `p_out = p_F + λ_r · p_A`.
pub fn combine_residual<'t>(p_frozen: Var<'t>, p_active: Var<'t>, lambda_r: f64) -> Var<'t> {
    p_frozen + p_active.scale(lambda_r)
}

pub fn combine_residual_plain(p_frozen: &Tensor, p_active: &Tensor, lambda_r: f64) -> Result<Tensor> {
    if p_frozen.shape() != p_active.shape() {
        return dim_err(format!("combine {:?} vs {:?}", p_frozen.shape(), p_active.shape()));
    }
    let mut out = p_frozen.clone();
    out.add_scaled(p_active, lambda_r);
    Ok(out)
}

/// New class-token rows `q + p_out · W_up`.
pub fn inject<'t>(cls: Var<'t>, p_out: Var<'t>, w_up: Var<'t>) -> Var<'t> {
    cls + p_out.matmul(w_up)
}

/// Replaces token 0 of each sample in a `B × (1+S) × D` grid with
/// `q + p_out · W_up`, leaving every other token untouched.
pub fn inject_cls(tokens: &Tensor, p_out: &Tensor, w_up: &Tensor) -> Result<Tensor> {
    let shape = tokens.shape();
    if shape.len() != 3 || shape[1] == 0 {
        return dim_err(format!("inject_cls expects B×(1+S)×D tokens, got {shape:?}"));
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if p_out.rows() != b || p_out.cols() != w_up.rows() || w_up.cols() != d {
        return dim_err(format!(
            "inject_cls: p_out {:?}, w_up {:?}, tokens {shape:?}",
            p_out.shape(),
            w_up.shape()
        ));
    }
    let delta = crate::numerics::matmul(p_out, w_up)?;
    let mut out = tokens.clone();
    for bi in 0..b {
        let row = &mut out.data_mut()[bi * t * d..bi * t * d + d];
        for (x, dx) in row.iter_mut().zip(delta.row(bi)) {
            *x += dx;
        }
    }
    Ok(out)
}
