//! Run artifacts: per-epoch CSV, JSON summaries and static SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use resprompt_core::uw::LossTerm;
use serde::{Deserialize, Serialize};

use crate::config::{Component, ExperimentConfig};
use crate::error::Result;
use crate::metrics::{avg_acc, avg_f};
use crate::model::ModelState;
use crate::train::History;
use crate::xcomp::XcompGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub config_hash: String,
    pub stages: usize,
    pub dropped: Vec<Component>,
    pub avg_acc: f64,
    /// Absent for a single stage.
    pub avg_f: Option<f64>,
    /// `D̄` measured ahead of each stage; none for the first.
    pub mean_drift: Vec<Option<f64>>,
    /// Prompts added ahead of each stage.
    pub expansion: Vec<usize>,
    pub pool_size: Vec<usize>,
    pub final_test_acc: Vec<f64>,
    pub head_swap_drop: Option<f64>,
    pub backbone_swap_drop: Option<f64>,
}

pub fn summarize(
    cfg: &ExperimentConfig,
    seed: u64,
    history: &History,
    xcomp: Option<&XcompGrid>,
) -> Result<RunSummary> {
    let r = &history.rmatrix;
    Ok(RunSummary {
        seed,
        config_hash: cfg.hash(),
        stages: r.stages,
        dropped: cfg.drop.clone(),
        avg_acc: avg_acc(r)?,
        avg_f: if r.stages >= 2 { Some(avg_f(r)?) } else { None },
        mean_drift: history.stages.iter().map(|s| s.mean_drift).collect(),
        expansion: history.stages.iter().map(|s| s.expanded_by).collect(),
        pool_size: history.stages.iter().map(|s| s.pool_size).collect(),
        final_test_acc: r.rows.last().cloned().unwrap_or_default(),
        head_swap_drop: xcomp.map(|x| x.head_swap_drop),
        backbone_swap_drop: xcomp.map(|x| x.backbone_swap_drop),
    })
}

/// One row per `(stage, epoch)`: every loss value, the weight it entered
/// the objective with, the total, learning rate and validation accuracy.
/// Terms not in use are left empty.
pub fn metrics_csv(history: &History) -> String {
    let mut out = String::from("stage,epoch");
    for t in LossTerm::ALL {
        write!(out, ",loss_{t}").unwrap();
    }
    for t in LossTerm::ALL {
        write!(out, ",weight_{t}").unwrap();
    }
    out.push_str(",total,lr,val_acc\n");
    let cell = |v: Option<&f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for row in &history.epochs {
        write!(out, "{},{}", row.stage + 1, row.epoch + 1).unwrap();
        for t in LossTerm::ALL {
            write!(out, ",{}", cell(row.losses.get(&t))).unwrap();
        }
        for t in LossTerm::ALL {
            write!(out, ",{}", cell(row.weights.get(&t))).unwrap();
        }
        writeln!(out, ",{},{},{}", row.total, row.lr, row.val_acc).unwrap();
    }
    out
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Writes the CSV, the R matrix and the plots derived from `history`.
pub fn write_history_artifacts(dir: &Path, history: &History) -> Result<()> {
    std::fs::create_dir_all(dir.join("plots"))?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(history))?;
    write_json(&dir.join("rmatrix.json"), &history.rmatrix)?;
    write_json(&dir.join("history.json"), history)?;
    std::fs::write(dir.join("plots/selection_heatmap.svg"), selection_heatmap(history))?;
    std::fs::write(dir.join("plots/usage_histogram.svg"), usage_histogram(history))?;
    std::fs::write(dir.join("plots/uw_curves.svg"), uw_curves(history))?;
    Ok(())
}

pub fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    write_json(&dir.join("summary.json"), summary)
}

pub fn write_xcomp(dir: &Path, grid: &XcompGrid) -> Result<()> {
    write_json(&dir.join("xcomp.json"), grid)
}

pub fn write_snapshots(dir: &Path, snapshots: &[ModelState]) -> Result<()> {
    std::fs::write(dir.join("snapshots.json"), serde_json::to_vec(snapshots)?)?;
    Ok(())
}

pub fn read_history(dir: &Path) -> Result<History> {
    Ok(serde_json::from_slice(&std::fs::read(dir.join("history.json"))?)?)
}

pub fn read_snapshots(dir: &Path) -> Result<Vec<ModelState>> {
    Ok(serde_json::from_slice(&std::fs::read(dir.join("snapshots.json"))?)?)
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    )
}

/// Mean usage of every prompt, one band per (stage, layer).
pub fn selection_heatmap(history: &History) -> String {
    let rows: Vec<(String, &Vec<f64>)> = history
        .stages
        .iter()
        .flat_map(|s| {
            s.mean_usage
                .iter()
                .enumerate()
                .map(move |(l, u)| (format!("s{} l{}", s.stage + 1, l), u))
        })
        .collect();
    let mut svg = svg_open("prompt selection (mean weight per prompt)");
    let cols = rows.iter().map(|(_, u)| u.len()).max().unwrap_or(1).max(1);
    let peak = rows
        .iter()
        .flat_map(|(_, u)| u.iter().copied())
        .fold(0.0, f64::max)
        .max(1e-12);
    let cw = (W - 2.0 * MARGIN) / cols as f64;
    let rh = (H - 2.0 * MARGIN) / rows.len().max(1) as f64;
    for (r, (label, u)) in rows.iter().enumerate() {
        let y = MARGIN + r as f64 * rh;
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"end\">{label}</text>",
            MARGIN - 4.0,
            y + rh * 0.7
        )
        .unwrap();
        for (c, &w) in u.iter().enumerate() {
            let shade = (255.0 * (1.0 - w / peak)).round() as u8;
            writeln!(
                svg,
                "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{cw:.2}\" height=\"{rh:.2}\" fill=\"rgb({shade},{shade},255)\"/>",
                MARGIN + c as f64 * cw
            )
            .unwrap();
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Final-stage usage per prompt, averaged over layers.
pub fn usage_histogram(history: &History) -> String {
    let mut svg = svg_open("prompt usage after the last stage");
    if let Some(last) = history.stages.last() {
        let n = last.mean_usage.first().map_or(0, Vec::len);
        let layers = last.mean_usage.len().max(1) as f64;
        let usage: Vec<f64> = (0..n)
            .map(|i| last.mean_usage.iter().map(|u| u[i]).sum::<f64>() / layers)
            .collect();
        let peak = usage.iter().copied().fold(0.0, f64::max).max(1e-12);
        let bw = (W - 2.0 * MARGIN) / n.max(1) as f64;
        for (i, u) in usage.iter().enumerate() {
            let h = (H - 2.0 * MARGIN) * u / peak;
            let fill = if last.active > 0 && i >= n - last.active {
                "#d95f02"
            } else {
                "#1b9e77"
            };
            writeln!(
                svg,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.2}\" height=\"{h:.1}\" fill=\"{fill}\"/>",
                MARGIN + i as f64 * bw,
                H - MARGIN - h,
                (bw - 1.0).max(0.5)
            )
            .unwrap();
        }
    }
    writeln!(
        svg,
        "<line x1=\"{MARGIN}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - MARGIN,
        W - MARGIN,
        H - MARGIN
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}

/// Effective loss weights over the epochs in which they were learned.
pub fn uw_curves(history: &History) -> String {
    let mut svg = svg_open("effective loss weights exp(-s)");
    let n = history.epochs.len().max(2);
    let peak = history
        .epochs
        .iter()
        .flat_map(|e| e.weights.values().copied())
        .fold(1.0, f64::max);
    let colors = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e"];
    for (t, color) in LossTerm::ALL.iter().zip(colors) {
        let pts: Vec<String> = history
            .epochs
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.weights.get(t).map(|w| (i, w)))
            .map(|(i, w)| {
                let x = MARGIN + (W - 2.0 * MARGIN) * i as f64 / (n - 1) as f64;
                let y = H - MARGIN - (H - 2.0 * MARGIN) * w / peak;
                format!("{x:.1},{y:.1}")
            })
            .collect();
        if pts.len() > 1 {
            writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                pts.join(" ")
            )
            .unwrap();
        }
        let idx = LossTerm::ALL.iter().position(|x| x == t).unwrap_or(0) as f64;
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" fill=\"{color}\">{t}</text>",
            W - MARGIN + 4.0,
            MARGIN + 12.0 * idx
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
