use crate::numerics::{Tensor, Var};

use super::COS_EPS;

/// Usage-weighted mean absolute cosine between distinct prompt values.
///
/// `weights` is `B × |S|` routing weights over the application set and
/// `values` the matching `|S| × d_a` value rows. With `u` the batch-mean
/// usage,
///
/// ```text
/// L = Σ_{i≠j} u_i u_j |⟨V̂_i, V̂_j⟩| / Σ_{i≠j} u_i u_j
/// ```
///
/// Fewer than two prompts or no co-usage mass gives a constant zero.
pub fn diversity_loss<'t>(weights: Var<'t>, values: Var<'t>) -> Var<'t> {
    let tape = weights.tape();
    let n = values.value().rows();
    let zero = || tape.constant_owned(Tensor::scalar(0.0));
    if n < 2 {
        return zero();
    }
    let usage = weights.mean_rows();
    let u = usage.value();
    let total: f64 = u.sum();
    let diag: f64 = u.data().iter().map(|x| x * x).sum();
    if total * total - diag <= 0.0 {
        return zero();
    }
    let mut mask = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        mask.data_mut()[i * n + i] = 0.0;
    }
    let mask = tape.constant_owned(mask);
    let unit = values.normalize_rows(COS_EPS);
    let sim = unit.matmul(unit.t()).abs();
    let pair = usage.t().matmul(usage) * mask;
    (pair * sim).sum().div(pair.sum())
}

/// Mean ℓ₂ norm of the value rows.
pub fn norm_loss<'t>(values: Var<'t>) -> Var<'t> {
    values.row_norms().mean()
}
