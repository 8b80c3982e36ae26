//! Oracles shared by the integration tests. Each one is written directly
//! from its definition and does not reuse library code paths.

#![allow(dead_code)]

use resprompt_core::{Tape, Tensor, Var};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this in every coordinate are compared absolutely.
const REL_FLOOR: f64 = 1e-4;

/// Worst relative error between tape gradients and central differences of
/// the scalar `f` over every input tensor.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t)).collect();
        f(&tape, &vars).value().item()
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (k, a) in analytic.iter().enumerate() {
        let num: Vec<f64> = (0..a.len())
            .map(|i| {
                let orig = xs[k].data()[i];
                xs[k].data_mut()[i] = orig + FD_STEP;
                let up = eval(&xs);
                xs[k].data_mut()[i] = orig - FD_STEP;
                let down = eval(&xs);
                xs[k].data_mut()[i] = orig;
                (up - down) / (2.0 * FD_STEP)
            })
            .collect();
        let diff = a
            .data()
            .iter()
            .zip(&num)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let scale = a.data().iter().chain(&num).map(|x| x.abs()).fold(REL_FLOOR, f64::max);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Euclidean projection onto the probability simplex by Michelot's
/// fixed-point iteration.
pub fn simplex_projection(v: &[f64]) -> Vec<f64> {
    let mut active: Vec<usize> = (0..v.len()).collect();
    loop {
        let theta = (active.iter().map(|&i| v[i]).sum::<f64>() - 1.0) / active.len() as f64;
        let keep: Vec<usize> = active.iter().copied().filter(|&i| v[i] > theta).collect();
        if keep.len() == active.len() {
            return v.iter().map(|x| (x - theta).max(0.0)).collect();
        }
        active = keep;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Mean and unbiased variance per column, two passes.
pub fn two_pass(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n - 1.0);
    (mean, var)
}

/// Largest elementwise relative difference, with `floor` guarding zeros.
pub fn max_rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
