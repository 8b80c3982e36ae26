//! Command-line entry points.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::backbone::PreparedData;
use crate::checkpoint::save_checkpoint;
use crate::config::{parse_drops, Component, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::report::{
    read_history, read_snapshots, summarize, write_history_artifacts, write_snapshots, write_summary, write_xcomp,
    RunSummary,
};
use crate::train::{measure_drift, Experiment};
use crate::xcomp::cross_composition;

#[derive(Parser, Debug)]
#[command(
    name = "resprompt",
    version,
    about = "Rehearsal-free domain-incremental learning with a sparse prompt pool"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the full multi-stage experiment.
    Run(RunArgs),
    /// Run with components removed. Without `--drop`, runs the full model,
    /// every single-component drop and the no-preservation variant.
    Ablate(RunArgs),
    /// Train through stage `--from`, then score drift on the training split of stage `--to`.
    Drift(DriftArgs),
    /// Regenerate the CSV and plots of a finished run.
    Report(ReportArgs),
    /// Recompute the cross-composition grid of a finished run.
    Xcomp(RunArgs),
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// TOML or JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Comma-separated components: pseudo, distill, div, norm, uw, pudd, query-enhancer.
    #[arg(long)]
    pub drop: Option<String>,
    /// Stage count; the severity list is cut or padded with its last value.
    #[arg(long)]
    pub stages: Option<usize>,
    /// Comma-separated per-stage severities.
    #[arg(long)]
    pub severity: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct DriftArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Last trained stage, 1-based.
    #[arg(long, default_value_t = 1)]
    pub from: usize,
    /// Stage whose training split is scored, 1-based.
    #[arg(long, default_value_t = 2)]
    pub to: usize,
}

#[derive(Args, Debug, Clone)]
pub struct ReportArgs {
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

/// Config file plus command-line overrides, validated.
pub fn resolve_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = &args.drop {
        cfg.drop = parse_drops(d)?;
    }
    if let Some(list) = &args.severity {
        cfg.severity = list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| HarnessError::Config(format!("severity `{s}`: {e}")))
            })
            .collect::<Result<_>>()?;
        if args.stages.is_none() {
            cfg.stages = cfg.severity.len();
        }
    }
    if let Some(t) = args.stages {
        cfg.stages = t;
        let last = cfg.severity.last().copied().unwrap_or(0.0);
        cfg.severity.resize(t, last);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one experiment and writes every artifact into `dir`.
pub fn execute_run(cfg: &ExperimentConfig, data: &PreparedData, dir: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(dir)?;
    let mut exp = Experiment::new(cfg, cfg.seed, data)?;
    exp.run()?;
    let grid = cross_composition(&exp.snapshots, data, &exp.opts, cfg.classes)?;
    let summary = summarize(cfg, cfg.seed, &exp.history, Some(&grid))?;
    write_history_artifacts(dir, &exp.history)?;
    write_summary(dir, &summary)?;
    write_xcomp(dir, &grid)?;
    write_snapshots(dir, &exp.snapshots)?;
    save_checkpoint(&exp, &dir.join("checkpoint.json"))?;
    Ok(summary)
}

/// The ablation grid: full model, each component removed alone, and both
/// preservation losses removed together.
pub fn ablation_grid() -> Vec<(String, Vec<Component>)> {
    let mut v = vec![("full".to_string(), Vec::new())];
    v.extend(Component::ALL.iter().map(|c| (format!("no-{c}"), vec![*c])));
    v.push((
        "no-preservation".to_string(),
        vec![Component::Distill, Component::Pseudo],
    ));
    v
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    avg_acc: f64,
    avg_f: Option<f64>,
}

fn ablate(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let data = PreparedData::generate(&cfg, cfg.seed)?;
    if args.drop.is_some() {
        let s = execute_run(&cfg, &data, &args.out_dir)?;
        println!(
            "avg_acc {:.4}  avg_f {}",
            s.avg_acc,
            s.avg_f.map_or("-".into(), |f| format!("{f:.4}"))
        );
        return Ok(());
    }
    let mut rows = Vec::new();
    for (name, drop) in ablation_grid() {
        let variant = ExperimentConfig { drop, ..cfg.clone() };
        let s = execute_run(&variant, &data, &args.out_dir.join(&name))?;
        println!(
            "{name:<20} avg_acc {:.4}  avg_f {}",
            s.avg_acc,
            s.avg_f.map_or("-".into(), |f| format!("{f:.4}"))
        );
        rows.push(AblationRow {
            variant: name,
            avg_acc: s.avg_acc,
            avg_f: s.avg_f,
        });
    }
    std::fs::write(args.out_dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(())
}

#[derive(Serialize)]
struct DriftOutput {
    from: usize,
    to: usize,
    mean_drift: f64,
    expands: bool,
    expansion: usize,
    scores: Vec<Vec<f64>>,
}

fn drift(args: &DriftArgs) -> Result<()> {
    let cfg = resolve_config(&args.run)?;
    if args.from < 1 || args.from > cfg.stages || args.to < 1 || args.to > cfg.stages {
        return Err(HarnessError::Config(format!(
            "stages {} and {} must lie in 1..={}",
            args.from, args.to, cfg.stages
        )));
    }
    let data = PreparedData::generate(&cfg, cfg.seed)?;
    let mut exp = Experiment::new(&cfg, cfg.seed, &data)?;
    while exp.state.stages_done < args.from {
        exp.run_stage()?;
    }
    let report = measure_drift(
        &exp.state.model,
        &data,
        &data.stages[args.to - 1].train,
        &exp.opts,
        &mut exp.state.monitors,
        cfg.batch_size,
    )?;
    let active = exp.state.model.pool.active().len();
    let out = DriftOutput {
        from: args.from,
        to: args.to,
        mean_drift: report.mean_drift,
        expands: resprompt_core::pudd::should_expand(report.mean_drift, cfg.theta),
        expansion: resprompt_core::pudd::expansion_size(active, report.mean_drift, &cfg.expansion_params()),
        scores: report.scores,
    };
    std::fs::create_dir_all(&args.run.out_dir)?;
    std::fs::write(args.run.out_dir.join("drift.json"), serde_json::to_string_pretty(&out)?)?;
    println!(
        "mean drift {:.4} (threshold {}, expand: {})",
        out.mean_drift, cfg.theta, out.expands
    );
    Ok(())
}

fn xcomp(args: &RunArgs) -> Result<()> {
    let cfg = resolve_config(args)?;
    let snapshots = read_snapshots(&args.out_dir)?;
    let data = PreparedData::generate(&cfg, cfg.seed)?;
    let grid = cross_composition(
        &snapshots,
        &data,
        &crate::model::RouteOptions::from_config(&cfg),
        cfg.classes,
    )?;
    write_xcomp(&args.out_dir, &grid)?;
    for row in &grid.accuracy {
        println!(
            "{}",
            row.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>().join(" ")
        );
    }
    println!(
        "head-swap drop {:.4}  backbone-swap drop {:.4}",
        grid.head_swap_drop, grid.backbone_swap_drop
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = resolve_config(&args)?;
            let data = PreparedData::generate(&cfg, cfg.seed)?;
            let s = execute_run(&cfg, &data, &args.out_dir)?;
            println!(
                "avg_acc {:.4}  avg_f {}",
                s.avg_acc,
                s.avg_f.map_or("-".into(), |f| format!("{f:.4}"))
            );
            Ok(())
        }
        Command::Ablate(args) => ablate(&args),
        Command::Drift(args) => drift(&args),
        Command::Report(args) => {
            let history = read_history(&args.out_dir)?;
            write_history_artifacts(&args.out_dir, &history)?;
            println!(
                "{} epoch rows written to {}",
                history.epochs.len(),
                args.out_dir.join("metrics.csv").display()
            );
            Ok(())
        }
        Command::Xcomp(args) => xcomp(&args),
    }
}

/// Parses `argv` and runs the command. Returns the process exit code:
/// 0 on success, 2 for usage or config errors, 3 for a numerical abort,
/// 1 otherwise.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
