//! Drift detection from prompt-selection statistics and drift-proportional
//! pool expansion sizing.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Drift-detector constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    /// Usage mass threshold τ_s.
    pub tau_s: f64,
    pub eps: f64,
    /// Weight of the entropy z-score.
    pub alpha_d: f64,
    /// Weight of the usage-set term.
    pub beta_d: f64,
    /// Floor on the IoU.
    pub eta: f64,
    pub window: usize,
}

impl Default for DriftParams {
    fn default() -> Self {
        Self {
            tau_s: 0.01,
            eps: 1e-10,
            alpha_d: 1.0,
            beta_d: 0.5,
            eta: 0.1,
            window: 100,
        }
    }
}

/// Column mean of a `B × N` weight matrix.
pub fn batch_mean_weights(weights: &Tensor) -> Result<Vec<f64>> {
    if weights.shape().len() != 2 || weights.rows() == 0 {
        return Err(Error::Contract(format!("batch mean of weights {:?}", weights.shape())));
    }
    let (b, n) = (weights.rows(), weights.cols());
    let mut out = vec![0.0; n];
    for r in 0..b {
        for (o, w) in out.iter_mut().zip(weights.row(r)) {
            *o += w;
        }
    }
    out.iter_mut().for_each(|o| *o /= b as f64);
    Ok(out)
}

/// `H = −Σ wᵢ log(wᵢ + ε)`.
pub fn selection_entropy(w: &[f64], eps: f64) -> f64 {
    -w.iter().map(|x| x * (x + eps).ln()).sum::<f64>()
}

/// Indices with `wᵢ > τ_s`.
pub fn usage_set(w: &[f64], tau_s: f64) -> BTreeSet<usize> {
    w.iter()
        .enumerate()
        .filter(|(_, &x)| x > tau_s)
        .map(|(i, _)| i)
        .collect()
}

/// Intersection over union; two empty sets give 1.
pub fn usage_iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Sliding window of `(H, S)` pairs for one adapter layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftMonitor {
    pub params: DriftParams,
    window: VecDeque<(f64, BTreeSet<usize>)>,
}

impl DriftMonitor {
    pub fn new(params: DriftParams) -> Result<Self> {
        if params.window == 0 {
            return Err(Error::Config("drift window must hold at least one entry".into()));
        }
        if !(params.eta > 0.0 && params.eta <= 1.0) {
            return Err(Error::Config(format!("IoU floor η = {} outside (0, 1]", params.eta)));
        }
        Ok(Self {
            params,
            window: VecDeque::with_capacity(params.window),
        })
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &(f64, BTreeSet<usize>)> {
        self.window.iter()
    }

    /// Appends an entry, evicting the oldest beyond capacity.
    pub fn push_window(&mut self, h: f64, s: BTreeSet<usize>) {
        if self.window.len() == self.params.window {
            self.window.pop_front();
        }
        self.window.push_back((h, s));
    }

    /// Union of the usage sets in the window.
    pub fn reference_set(&self) -> BTreeSet<usize> {
        self.window.iter().flat_map(|(_, s)| s.iter().copied()).collect()
    }

    /// Mean and population standard deviation of the window entropies.
    pub fn entropy_moments(&self) -> (f64, f64) {
        let n = self.window.len() as f64;
        if n == 0.0 {
            return (0.0, 0.0);
        }
        let mean = self.window.iter().map(|(h, _)| h).sum::<f64>() / n;
        let var = self.window.iter().map(|(h, _)| (h - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Scores a batch against the current window:
    /// `α·|H − H̄|/(σ_H + ε) + β·(1/max(IoU, η) − 1)`.
    /// Fewer than two window entries score 0.
    pub fn drift_score(&self, h: f64, iou: f64) -> f64 {
        if self.window.len() < 2 {
            return 0.0;
        }
        let p = &self.params;
        let (mean, std) = self.entropy_moments();
        p.alpha_d * (h - mean).abs() / (std + p.eps) + p.beta_d * (1.0 / iou.max(p.eta) - 1.0)
    }

    /// Scores one batch of routing weights and then records it.
    pub fn observe(&mut self, weights: &Tensor) -> Result<f64> {
        let w = batch_mean_weights(weights)?;
        let h = selection_entropy(&w, self.params.eps);
        let s = usage_set(&w, self.params.tau_s);
        let iou = usage_iou(&s, &self.reference_set());
        let d = self.drift_score(h, iou);
        self.push_window(h, s);
        Ok(d)
    }

    /// Records a batch without scoring it.
    pub fn record(&mut self, weights: &Tensor) -> Result<()> {
        let w = batch_mean_weights(weights)?;
        let h = selection_entropy(&w, self.params.eps);
        self.push_window(h, usage_set(&w, self.params.tau_s));
        Ok(())
    }
}

/// Free-function form of [`DriftMonitor::drift_score`].
pub fn drift_score(h: f64, monitor: &DriftMonitor, iou: f64) -> f64 {
    monitor.drift_score(h, iou)
}

/// Per-layer, per-batch drift scores and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// `scores[l][t]` for adapter layer `l` and batch `t`.
    pub scores: Vec<Vec<f64>>,
    pub mean_drift: f64,
}

impl DriftReport {
    pub fn new(scores: Vec<Vec<f64>>) -> Result<Self> {
        let finite: Vec<f64> = scores.iter().flatten().copied().filter(|x| x.is_finite()).collect();
        if finite.is_empty() {
            return Err(Error::Contract("drift report without any finite score".into()));
        }
        let mean_drift = finite.iter().sum::<f64>() / finite.len() as f64;
        Ok(Self { scores, mean_drift })
    }
}

/// Expansion sizing constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionParams {
    pub d_max: f64,
    pub e_min: usize,
    pub e_max: usize,
}

impl Default for ExpansionParams {
    fn default() -> Self {
        Self {
            d_max: 5.0,
            e_min: 10,
            e_max: 80,
        }
    }
}

/// `clamp(⌊|A| · D̄ / D_max⌋, E_min, E_max)`.
pub fn expansion_size(active_count: usize, mean_drift: f64, p: &ExpansionParams) -> usize {
    let raw = (active_count as f64 * mean_drift / p.d_max).floor();
    let raw = if raw.is_finite() { raw.max(0.0) } else { p.e_max as f64 };
    (raw as usize).clamp(p.e_min, p.e_max)
}

/// Inclusive threshold test `D̄ ≥ θ`.
pub fn should_expand(mean_drift: f64, theta: f64) -> bool {
    mean_drift >= theta
}
