//! Cross-composition: features from the model of stage `i` classified by
//! the head of stage `j`, for every pair.

use serde::{Deserialize, Serialize};

use crate::backbone::PreparedData;
use crate::error::{HarnessError, Result};
use crate::metrics::{accuracy, macro_f1};
use crate::model::{features, predict, ModelState, RouteOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XcompGrid {
    /// `accuracy[i][j]`: mean over every stage's test set.
    pub accuracy: Vec<Vec<f64>>,
    /// Macro-F1 over the pooled test sets.
    pub macro_f1: Vec<Vec<f64>>,
    /// `per_set[i][j][k]`: accuracy on test set `k`.
    pub per_set: Vec<Vec<Vec<f64>>>,
    /// Mean drop from the final diagonal when the final model is read out
    /// by an earlier head.
    pub head_swap_drop: f64,
    /// Mean drop when the final head reads an earlier model's features.
    pub backbone_swap_drop: f64,
}

pub fn cross_composition(
    snapshots: &[ModelState],
    data: &PreparedData,
    opts: &RouteOptions,
    classes: usize,
) -> Result<XcompGrid> {
    let t = data.stages.len();
    if snapshots.len() != t {
        return Err(HarnessError::State(format!(
            "{} snapshots for {t} stages",
            snapshots.len()
        )));
    }
    let mut grid = XcompGrid {
        accuracy: vec![vec![0.0; t]; t],
        macro_f1: vec![vec![0.0; t]; t],
        per_set: vec![vec![Vec::new(); t]; t],
        head_swap_drop: 0.0,
        backbone_swap_drop: 0.0,
    };
    for (i, model) in snapshots.iter().enumerate() {
        let feats = data
            .stages
            .iter()
            .map(|s| features(model, &data.backbone, &s.test, opts))
            .collect::<Result<Vec<_>>>()?;
        for (j, head_owner) in snapshots.iter().enumerate() {
            let mut all_pred = Vec::new();
            let mut all_lab = Vec::new();
            let mut per = Vec::with_capacity(t);
            for (f, s) in feats.iter().zip(&data.stages) {
                let pred = predict(&head_owner.head, f)?;
                per.push(accuracy(&pred, &s.test.labels)?);
                all_pred.extend(pred);
                all_lab.extend_from_slice(&s.test.labels);
            }
            grid.accuracy[i][j] = per.iter().sum::<f64>() / t as f64;
            grid.macro_f1[i][j] = macro_f1(&all_pred, &all_lab, classes)?;
            grid.per_set[i][j] = per;
        }
    }
    let (head, backbone) = swap_drops(&grid.accuracy);
    grid.head_swap_drop = head;
    grid.backbone_swap_drop = backbone;
    Ok(grid)
}

/// `(mean_{j<T}(g[T][T] − g[T][j]), mean_{i<T}(g[T][T] − g[i][T]))`, zero
/// for a single stage.
pub fn swap_drops(g: &[Vec<f64>]) -> (f64, f64) {
    let t = g.len();
    if t < 2 {
        return (0.0, 0.0);
    }
    let last = t - 1;
    let diag = g[last][last];
    let head = (0..last).map(|j| diag - g[last][j]).sum::<f64>() / last as f64;
    let backbone = (0..last).map(|i| diag - g[i][last]).sum::<f64>() / last as f64;
    (head, backbone)
}
