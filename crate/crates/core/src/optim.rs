//! AdamW with decoupled weight decay and a cosine learning-rate schedule.

use std::collections::BTreeMap;

use crate::numerics::Tensor;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    lr: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            lr: 0.0,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Starts a new step at learning rate `lr`.
    pub fn begin_step(&mut self, lr: f64) {
        self.lr = lr;
        self.step += 1;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates `param` in place. When `trainable_rows` is given, rows marked
    /// `false` are left bit-identical (no decay, no moment update).
    pub fn update(
        &mut self,
        name: &str,
        param: &mut Tensor,
        grad: &Tensor,
        decay: bool,
        trainable_rows: Option<&[bool]>,
    ) {
        assert_eq!(param.shape(), grad.shape(), "AdamW update of `{name}`");
        let entry = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        if entry.0.shape() != param.shape() {
            *entry = (Tensor::zeros(param.shape()), Tensor::zeros(param.shape()));
        }
        let (m, v) = entry;
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let cols = param.cols();
        let wd = if decay { self.weight_decay } else { 0.0 };
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let p = param.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, &g) in grad.data().iter().enumerate() {
            if let Some(rows) = trainable_rows {
                if !rows[i / cols] {
                    continue;
                }
            }
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p[i]);
        }
    }
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}
