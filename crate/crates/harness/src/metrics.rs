//! Accuracy, macro-F1 and the stage-by-stage accuracy matrix.

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() || pred.is_empty() {
        return Err(HarnessError::State(format!(
            "accuracy over {} predictions and {} labels",
            pred.len(),
            labels.len()
        )));
    }
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64)
}

/// Unweighted mean of per-class F1. Classes absent from both predictions
/// and labels are left out of the mean.
pub fn macro_f1(pred: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    accuracy(pred, labels)?;
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fneg = vec![0usize; classes];
    for (&p, &l) in pred.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(HarnessError::State(format!(
                "class index {} outside {classes}",
                p.max(l)
            )));
        }
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[l] += 1;
        }
    }
    let scores: Vec<f64> = (0..classes)
        .filter(|&c| tp[c] + fp[c] + fneg[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fneg[c]) as f64)
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// `rows[i][j]`: accuracy on stage `j`'s test set after training stage `i`,
/// for `j ≤ i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RMatrix {
    pub stages: usize,
    pub rows: Vec<Vec<f64>>,
}

impl RMatrix {
    pub fn new(stages: usize) -> Self {
        Self {
            stages,
            rows: Vec::with_capacity(stages),
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut r = Self::new(rows.len());
        for row in rows {
            r.push_row(row)?;
        }
        Ok(r)
    }

    /// Appends the row of the next stage; it must hold one entry per stage seen.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let i = self.rows.len();
        if i >= self.stages {
            return Err(HarnessError::State(format!(
                "R matrix already has {} rows",
                self.stages
            )));
        }
        if row.len() != i + 1 {
            return Err(HarnessError::State(format!(
                "R row {i} has {} entries, expected {}",
                row.len(),
                i + 1
            )));
        }
        if let Some(x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(HarnessError::State(format!("accuracy {x} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.stages > 0 && self.rows.len() == self.stages
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }
}

/// `(1/T) Σᵢ (1/i) Σ_{j≤i} R[i][j]`.
pub fn avg_acc(r: &RMatrix) -> Result<f64> {
    if !r.is_complete() {
        return Err(HarnessError::State(format!(
            "R matrix has {} of {} rows",
            r.rows.len(),
            r.stages
        )));
    }
    let t = r.stages as f64;
    Ok(r.rows
        .iter()
        .map(|row| row.iter().sum::<f64>() / row.len() as f64)
        .sum::<f64>()
        / t)
}

/// `(1/(T−1)) Σ_{j<T} (max_{i≥j} R[i][j] − R[T][j])`.
pub fn avg_f(r: &RMatrix) -> Result<f64> {
    if !r.is_complete() {
        return Err(HarnessError::State(format!(
            "R matrix has {} of {} rows",
            r.rows.len(),
            r.stages
        )));
    }
    let t = r.stages;
    if t < 2 {
        return Err(HarnessError::State("forgetting needs at least two stages".into()));
    }
    let last = &r.rows[t - 1];
    let total: f64 = (0..t - 1)
        .map(|j| {
            let peak = (j..t).map(|i| r.rows[i][j]).fold(f64::NEG_INFINITY, f64::max);
            peak - last[j]
        })
        .sum();
    Ok(total / (t - 1) as f64)
}
