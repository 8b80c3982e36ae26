use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{MhaVars, MultiHeadAttention, Tensor, Var};

/// Key/value slots shared by every layer. Read by attention, written by a
/// gradient-free exponential moving average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    pub keys: Tensor,
    pub values: Tensor,
    /// EMA coefficient γ: the retained fraction of the old slot.
    pub momentum: f64,
}

impl MemoryBank {
    pub fn new(keys: Tensor, values: Tensor, momentum: f64) -> Result<Self> {
        if keys.shape() != values.shape() || keys.shape().len() != 2 {
            return dim_err(format!("memory keys {:?} vs values {:?}", keys.shape(), values.shape()));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("memory momentum {momentum} outside [0, 1]")));
        }
        Ok(Self { keys, values, momentum })
    }

    pub fn random<R: Rng + ?Sized>(slots: usize, dim: usize, momentum: f64, rng: &mut R) -> Result<Self> {
        let keys = Tensor::randn(&[slots, dim], 1.0, rng);
        let values = Tensor::randn(&[slots, dim], 1.0, rng);
        Self::new(keys, values, momentum)
    }

    pub fn slots(&self) -> usize {
        self.keys.rows()
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }
}

/// `r = MHA(q, M_K, M_V)`. The bank enters the tape as constants, so only
/// the query and the attention projections are differentiable.
pub fn read_memory<'t>(q: Var<'t>, bank: &MemoryBank, attn: &MultiHeadAttention, w: &MhaVars<'t>) -> Var<'t> {
    let tape = q.tape();
    let keys = tape.constant(&bank.keys);
    let values = tape.constant(&bank.values);
    attn.forward(w, q, keys, values)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb + super::COS_EPS)
}

/// Index of the key slot with the highest cosine similarity to each query.
/// Ties go to the lower slot.
pub fn nearest_slots(bank: &MemoryBank, queries: &Tensor) -> Vec<usize> {
    (0..queries.rows())
        .map(|r| {
            let q = queries.row(r);
            let mut best = (0, f64::NEG_INFINITY);
            for k in 0..bank.slots() {
                let c = cosine(q, bank.keys.row(k));
                if c > best.1 {
                    best = (k, c);
                }
            }
            best.0
        })
        .collect()
}

/// EMA write. Each raw query picks its nearest key slot; a slot that
/// received queries moves its key toward their mean and its value toward
/// the mean of the matching enhanced queries:
///
/// `M[k] ← γ·M[k] + (1−γ)·mean(assigned)`.
///
/// Slots with no assignment are untouched.
pub fn write_memory_ema(bank: &mut MemoryBank, queries: &Tensor, enhanced: &Tensor) -> Result<()> {
    if queries.shape() != enhanced.shape() || queries.cols() != bank.dim() {
        return dim_err(format!(
            "memory write: queries {:?}, enhanced {:?}, bank dim {}",
            queries.shape(),
            enhanced.shape(),
            bank.dim()
        ));
    }
    let assign = nearest_slots(bank, queries);
    let d = bank.dim();
    let gamma = bank.momentum;
    for k in 0..bank.slots() {
        let members: Vec<usize> = assign
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == k)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        let n = members.len() as f64;
        let mut mean_q = vec![0.0; d];
        let mut mean_e = vec![0.0; d];
        for &i in &members {
            for j in 0..d {
                mean_q[j] += queries.at(i, j) / n;
                mean_e[j] += enhanced.at(i, j) / n;
            }
        }
        for (m, x) in bank.keys.row_mut(k).iter_mut().zip(&mean_q) {
            *m = gamma * *m + (1.0 - gamma) * x;
        }
        for (m, x) in bank.values.row_mut(k).iter_mut().zip(&mean_e) {
            *m = gamma * *m + (1.0 - gamma) * x;
        }
    }
    Ok(())
}
