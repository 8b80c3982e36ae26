//! The multi-stage protocol: drift pass and expansion, training with early
//! stopping, statistics and teacher hand-off, evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use resprompt_core::numerics::Gradients;
use resprompt_core::optim::{cosine_lr, AdamW};
use resprompt_core::pudd::{expansion_size, should_expand, DriftMonitor, DriftReport};
use resprompt_core::rng::stream;
use resprompt_core::routing::{diversity_loss, expand_pool, norm_loss, write_memory_ema};
use resprompt_core::skp::{
    merge_stats, pseudo_kd_loss, real_kd_loss, sample_pseudo, snapshot_teacher, ClassStats, ClassifierHead, HeadVars,
};
use resprompt_core::uw::{plain_sum, total_loss, LogVarVars, LossTerm, UncertaintyWeights};
use resprompt_core::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{PreparedData, PreparedSplit};
use crate::checkpoint::Checkpoint;
use crate::config::{Component, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::{accuracy, RMatrix};
use crate::model::{
    eval_batch, features, forward, predict, usage_matrix, Forward, ModelState, ModelVars, RouteOptions,
};

/// Everything carried from one stage to the next.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub model: ModelState,
    pub teacher: Option<ClassifierHead>,
    /// Cumulative per-class feature statistics of completed stages.
    pub stats: Option<ClassStats>,
    pub uw: UncertaintyWeights,
    /// One per injected layer.
    pub monitors: Vec<DriftMonitor>,
    pub stages_done: usize,
    #[serde(with = "crate::checkpoint::rng_serde")]
    pub rng: ChaCha8Rng,
}

impl LearnerState {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let layers = RouteOptions::from_config(cfg).injected_layers().len();
        let monitor = DriftMonitor::new(cfg.drift_params())?;
        Ok(Self {
            model: ModelState::new(cfg, seed)?,
            teacher: None,
            stats: None,
            uw: UncertaintyWeights::default(),
            monitors: vec![monitor; layers],
            stages_done: 0,
            rng: stream(seed, "train"),
        })
    }
}

/// Protocol milestones, in the order they happened.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    DriftMeasured { stage: usize },
    Expanded { stage: usize, count: usize },
    TrainingStarted { stage: usize },
    TrainingFinished { stage: usize },
    StatsMerged { stage: usize },
    TeacherSnapshot { stage: usize },
    Evaluated { stage: usize },
}

/// Per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub stage: usize,
    pub epoch: usize,
    /// Mean over batches of each loss term in use.
    pub losses: BTreeMap<LossTerm, f64>,
    /// Multiplier applied to each term in the objective.
    pub weights: BTreeMap<LossTerm, f64>,
    pub total: f64,
    pub lr: f64,
    pub val_acc: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    pub best_val_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub severity: f64,
    pub mean_drift: Option<f64>,
    /// Mean drift score of each injected layer.
    pub layer_drift: Vec<f64>,
    pub expanded_by: usize,
    pub pool_size: usize,
    pub frozen: usize,
    pub active: usize,
    pub epochs_run: usize,
    pub best_val_acc: f64,
    /// Accuracy on test sets `0..=stage` after this stage.
    pub test_acc: Vec<f64>,
    /// Per injected layer, mean pool usage over this stage's test set.
    pub mean_usage: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub events: Vec<Event>,
    pub epochs: Vec<EpochRow>,
    pub stages: Vec<StageSummary>,
    pub rmatrix: RMatrix,
}

/// One experiment over a prepared stream.
pub struct Experiment<'d> {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub data: &'d PreparedData,
    pub opts: RouteOptions,
    pub state: LearnerState,
    pub history: History,
    /// Model state at the end of every completed stage.
    pub snapshots: Vec<ModelState>,
}

/// Scores every batch of `split` against the monitors, updating their
/// windows as batches stream past.
pub fn measure_drift(
    model: &ModelState,
    data: &PreparedData,
    split: &PreparedSplit,
    opts: &RouteOptions,
    monitors: &mut [DriftMonitor],
    batch: usize,
) -> Result<DriftReport> {
    if split.is_empty() {
        return Err(resprompt_core::Error::Contract("drift pass over an empty split".into()).into());
    }
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut scores = vec![Vec::new(); monitors.len()];
    for chunk in idx.chunks(batch.max(1)) {
        let out = eval_batch(model, &data.backbone, split, chunk, opts);
        for ((m, u), s) in monitors.iter_mut().zip(&out.usage).zip(scores.iter_mut()) {
            s.push(m.observe(u)?);
        }
    }
    Ok(DriftReport::new(scores)?)
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (r, &c) in labels.iter().enumerate() {
        t.row_mut(r)[c] = 1.0;
    }
    t
}

/// Inputs of the per-batch objective.
pub struct LossInputs<'a, 't> {
    pub cfg: &'a ExperimentConfig,
    pub stage: usize,
    pub fwd: &'a Forward<'t>,
    pub vars: &'a ModelVars<'t>,
    pub head: &'a HeadVars<'t>,
    pub labels: &'a [usize],
    pub teacher: Option<&'a ClassifierHead>,
    pub stats: Option<&'a ClassStats>,
}

/// The loss terms in use for this batch and stage, each as its own node.
pub fn assemble_losses<'t>(x: &LossInputs<'_, 't>, rng: &mut ChaCha8Rng) -> Result<Vec<(LossTerm, Var<'t>)>> {
    let cfg = x.cfg;
    let tape = x.fwd.features.tape();
    let logits = x.head.forward(x.fwd.features);
    let targets = tape.constant_owned(one_hot(x.labels, cfg.classes));
    let ce = (targets * logits.log_softmax_rows())
        .sum()
        .scale(-1.0 / x.labels.len() as f64);
    let mut terms = vec![(LossTerm::Ce, ce)];
    if x.stage > 0 {
        let teacher = x
            .teacher
            .ok_or_else(|| HarnessError::State(format!("stage {} has no teacher", x.stage + 1)))?;
        if !cfg.dropped(Component::Distill) {
            terms.push((
                LossTerm::Real,
                real_kd_loss(x.fwd.features, teacher, x.head, cfg.temperature)?,
            ));
        }
        if !cfg.dropped(Component::Pseudo) {
            let stats = x
                .stats
                .ok_or_else(|| HarnessError::State("pseudo replay without class statistics".into()))?;
            let (f, _) = sample_pseudo(stats, cfg.pseudo_count(), rng)?;
            terms.push((
                LossTerm::Pseudo,
                pseudo_kd_loss(tape.constant_owned(f), teacher, x.head, cfg.temperature)?,
            ));
        }
    }
    if !cfg.dropped(Component::Div) && !x.fwd.traces.is_empty() {
        let values = x.vars.pool.active_values;
        let mut div: Option<Var<'t>> = None;
        for t in &x.fwd.traces {
            let d = diversity_loss(t.routing.weights_active, values);
            div = Some(match div {
                Some(acc) => acc + d,
                None => d,
            });
        }
        let div = div.expect("at least one trace").scale(1.0 / x.fwd.traces.len() as f64);
        terms.push((LossTerm::Div, div));
    }
    if x.stage > 0 && !cfg.dropped(Component::Norm) {
        terms.push((LossTerm::Norm, norm_loss(x.vars.pool.active_values)));
    }
    Ok(terms)
}

/// Combines the terms: plain sum at stage 1 or with weighting switched
/// off, learned weighting otherwise.
pub fn objective<'t>(terms: &[(LossTerm, Var<'t>)], uw: Option<&LogVarVars<'t>>) -> Result<Var<'t>> {
    Ok(match uw {
        Some(s) => total_loss(terms, s)?,
        None => plain_sum(terms)?,
    })
}

/// Row-wise concatenation of tape values.
fn stack_rows<'t>(mut vars: impl Iterator<Item = Var<'t>>) -> Result<Tensor> {
    let mut out = (*vars.next().expect("non-empty").value()).clone();
    for v in vars {
        out.append_rows(&v.value())?;
    }
    Ok(out)
}

fn is_matrix(t: &Tensor) -> bool {
    t.shape().len() == 2
}

fn update_model(model: &mut ModelState, opt: &mut AdamW, grads: &Gradients, vars: &ModelVars<'_>, head: &HeadVars<'_>) {
    let mask = model.pool.trainable_mask();
    if let Some(g) = grads.get(vars.pool.active_keys) {
        let full = model.pool.full_gradient(g);
        opt.update("pool.keys", &mut model.pool.keys, &full, true, Some(&mask));
    }
    if let Some(g) = grads.get(vars.pool.active_values) {
        let full = model.pool.full_gradient(g);
        opt.update("pool.values", &mut model.pool.values, &full, true, Some(&mask));
    }
    let attn = &mut model.memory_attn;
    let pairs = [
        ("attn.wq", &mut attn.wq, vars.attn.wq),
        ("attn.wk", &mut attn.wk, vars.attn.wk),
        ("attn.wv", &mut attn.wv, vars.attn.wv),
        ("attn.wo", &mut attn.wo, vars.attn.wo),
    ];
    for (name, p, v) in pairs {
        if let Some(g) = grads.get(v) {
            opt.update(name, p, g, true, None);
        }
    }
    for (l, (adapter, av)) in model.adapters.iter_mut().zip(&vars.adapters).enumerate() {
        let handles = [av.w1, av.w2, av.ln_gain, av.ln_bias, av.w_down, av.w_up];
        for ((name, p), v) in adapter.params_mut().into_iter().zip(handles) {
            if let Some(g) = grads.get(v) {
                let decay = is_matrix(p);
                opt.update(&format!("adapter{l}.{name}"), p, g, decay, None);
            }
        }
    }
    if let Some(g) = grads.get(head.weight) {
        opt.update("head.weight", &mut model.head.weight, g, true, None);
    }
    if let Some(g) = grads.get(head.bias) {
        opt.update("head.bias", &mut model.head.bias, g, false, None);
    }
}

fn update_log_vars(uw: &mut UncertaintyWeights, opt: &mut AdamW, grads: &Gradients, s: &LogVarVars<'_>) {
    for (term, v) in s {
        if let Some(g) = grads.get(*v) {
            let mut p = Tensor::scalar(uw.get(*term));
            opt.update(&format!("uw.{term}"), &mut p, g, false, None);
            uw.log_vars.insert(*term, p.item());
        }
    }
    uw.clamp();
}

/// Loss values of one step.
struct StepLog {
    losses: Vec<(LossTerm, f64)>,
    total: f64,
}

impl<'d> Experiment<'d> {
    pub fn new(cfg: &ExperimentConfig, seed: u64, data: &'d PreparedData) -> Result<Self> {
        cfg.validate()?;
        if data.stages.len() != cfg.stages {
            return Err(HarnessError::Config(format!(
                "{} prepared stages for {} configured",
                data.stages.len(),
                cfg.stages
            )));
        }
        Ok(Self {
            cfg: cfg.clone(),
            seed,
            data,
            opts: RouteOptions::from_config(cfg),
            state: LearnerState::new(cfg, seed)?,
            history: History {
                events: Vec::new(),
                epochs: Vec::new(),
                stages: Vec::new(),
                rmatrix: RMatrix::new(cfg.stages),
            },
            snapshots: Vec::new(),
        })
    }

    /// Resumes from a stored state.
    /// Continues from a checkpoint taken between stages.
    pub fn resume(cfg: &ExperimentConfig, seed: u64, data: &'d PreparedData, ckpt: Checkpoint) -> Result<Self> {
        let mut e = Self::new(cfg, seed, data)?;
        let done = ckpt.state.stages_done;
        let h = &ckpt.history;
        if done > cfg.stages || h.rmatrix.rows.len() != done || h.stages.len() != done || ckpt.snapshots.len() != done {
            return Err(HarnessError::Checkpoint(format!(
                "checkpoint after {done} stages holds {} R rows, {} stage summaries and {} snapshots",
                h.rmatrix.rows.len(),
                h.stages.len(),
                ckpt.snapshots.len()
            )));
        }
        e.state = ckpt.state;
        e.history = ckpt.history;
        e.snapshots = ckpt.snapshots;
        Ok(e)
    }

    pub fn is_finished(&self) -> bool {
        self.state.stages_done >= self.cfg.stages
    }

    /// Runs every remaining stage.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_stage()?;
        }
        Ok(())
    }

    /// Drift pass and expansion ahead of stage `k > 0`.
    pub fn prepare_stage(&mut self, k: usize) -> Result<(Option<DriftReport>, usize)> {
        if k == 0 {
            return Ok((None, 0));
        }
        if self.state.teacher.is_none() {
            return Err(HarnessError::State(format!("stage {} starts without a teacher", k + 1)));
        }
        let split = &self.data.stages[k].train;
        let report = measure_drift(
            &self.state.model,
            self.data,
            split,
            &self.opts,
            &mut self.state.monitors,
            self.cfg.batch_size,
        )?;
        self.history.events.push(Event::DriftMeasured { stage: k });
        let count = if self.cfg.dropped(Component::Pudd) {
            self.cfg.e_min
        } else if should_expand(report.mean_drift, self.cfg.theta) {
            expansion_size(
                self.state.model.pool.active().len(),
                report.mean_drift,
                &self.cfg.expansion_params(),
            )
        } else {
            0
        };
        if count > 0 {
            expand_pool(&mut self.state.model.pool, count, &mut self.state.rng)?;
            self.history.events.push(Event::Expanded { stage: k, count });
        }
        if self.cfg.reset_uw {
            self.state.uw = UncertaintyWeights::default();
        }
        Ok((Some(report), count))
    }

    /// Runs the next stage of the protocol.
    pub fn run_stage(&mut self) -> Result<()> {
        let k = self.state.stages_done;
        if k >= self.cfg.stages {
            return Err(HarnessError::State(format!(
                "all {} stages already ran",
                self.cfg.stages
            )));
        }
        let (report, expanded_by) = self.prepare_stage(k)?;
        let outcome = self.train_current_stage(k)?;
        self.finish_stage(k, report, expanded_by, outcome)
    }

    /// Training with early stopping; the best model is restored.
    pub fn train_current_stage(&mut self, k: usize) -> Result<TrainOutcome> {
        self.history.events.push(Event::TrainingStarted { stage: k });
        let (epochs_run, best_val_acc) = self.train_stage(k)?;
        self.history.events.push(Event::TrainingFinished { stage: k });
        Ok(TrainOutcome {
            epochs_run,
            best_val_acc,
        })
    }

    /// Statistics, teacher snapshot and evaluation after stage `k` trained.
    pub fn finish_stage(
        &mut self,
        k: usize,
        report: Option<DriftReport>,
        expanded_by: usize,
        outcome: TrainOutcome,
    ) -> Result<()> {
        let TrainOutcome {
            epochs_run,
            best_val_acc,
        } = outcome;
        let stage = &self.data.stages[k];
        let f = features(&self.state.model, &self.data.backbone, &stage.train, &self.opts)?;
        let mut current = ClassStats::new(self.cfg.classes, self.cfg.feature_dim);
        current.update_batch(&f, &stage.train.labels)?;
        self.state.stats = Some(match &self.state.stats {
            Some(prev) => merge_stats(prev, &current)?,
            None => current,
        });
        self.history.events.push(Event::StatsMerged { stage: k });
        self.state.teacher = Some(snapshot_teacher(&self.state.model.head));
        self.history.events.push(Event::TeacherSnapshot { stage: k });

        let test_acc = (0..=k)
            .map(|j| self.evaluate(&self.data.stages[j].test))
            .collect::<Result<Vec<_>>>()?;
        self.history.rmatrix.push_row(test_acc.clone())?;
        self.history.events.push(Event::Evaluated { stage: k });

        let pool = &self.state.model.pool;
        self.history.stages.push(StageSummary {
            stage: k,
            severity: self.cfg.severity[k],
            mean_drift: report.as_ref().map(|r| r.mean_drift),
            layer_drift: report
                .as_ref()
                .map(|r| {
                    r.scores
                        .iter()
                        .map(|s| s.iter().sum::<f64>() / s.len().max(1) as f64)
                        .collect()
                })
                .unwrap_or_default(),
            expanded_by,
            pool_size: pool.len(),
            frozen: pool.frozen().len(),
            active: pool.active().len(),
            epochs_run,
            best_val_acc,
            test_acc,
            mean_usage: self.mean_usage(&stage.test)?,
        });
        self.snapshots.push(self.state.model.clone());
        self.state.stages_done += 1;
        Ok(())
    }

    /// Student-head accuracy on `split`.
    pub fn evaluate(&self, split: &PreparedSplit) -> Result<f64> {
        let f = features(&self.state.model, &self.data.backbone, split, &self.opts)?;
        accuracy(&predict(&self.state.model.head, &f)?, &split.labels)
    }

    fn mean_usage(&self, split: &PreparedSplit) -> Result<Vec<Vec<f64>>> {
        let idx: Vec<usize> = (0..split.len()).collect();
        let n = self.state.model.pool.len();
        let mut acc = vec![vec![0.0; n]; self.opts.injected_layers().len()];
        for chunk in idx.chunks(crate::model::EVAL_BATCH) {
            let out = eval_batch(&self.state.model, &self.data.backbone, split, chunk, &self.opts);
            for (a, u) in acc.iter_mut().zip(&out.usage) {
                for r in 0..u.rows() {
                    for (x, w) in a.iter_mut().zip(u.row(r)) {
                        *x += w / split.len() as f64;
                    }
                }
            }
        }
        Ok(acc)
    }

    fn uses_weighting(&self, k: usize) -> bool {
        k > 0 && !self.cfg.dropped(Component::Uw)
    }

    fn train_stage(&mut self, k: usize) -> Result<(usize, f64)> {
        let split = &self.data.stages[k].train;
        let batches = split.len().div_ceil(self.cfg.batch_size);
        let total_steps = batches * self.cfg.epochs;
        let mut opt = AdamW::new(self.cfg.weight_decay);
        let mut best: Option<(f64, ModelState, UncertaintyWeights)> = None;
        let mut since_best = 0;
        let mut epochs_run = 0;
        let mut step = 0;
        for epoch in 0..self.cfg.epochs {
            let mut order: Vec<usize> = (0..split.len()).collect();
            order.shuffle(&mut self.state.rng);
            let mut sums: BTreeMap<LossTerm, f64> = BTreeMap::new();
            let mut total = 0.0;
            let mut lr = 0.0;
            for idx in order.chunks(self.cfg.batch_size) {
                lr = cosine_lr(self.cfg.learning_rate, step, total_steps);
                opt.begin_step(lr);
                let log = self.train_step(k, split, idx, &mut opt)?;
                for (t, v) in log.losses {
                    *sums.entry(t).or_insert(0.0) += v / batches as f64;
                }
                total += log.total / batches as f64;
                step += 1;
            }
            epochs_run += 1;
            let val_acc = self.evaluate(&self.data.stages[k].val)?;
            let weights = sums
                .keys()
                .map(|&t| {
                    let w = if self.uses_weighting(k) {
                        self.state.uw.effective_weights()[&t]
                    } else {
                        1.0
                    };
                    (t, w)
                })
                .collect();
            self.history.epochs.push(EpochRow {
                stage: k,
                epoch,
                losses: sums,
                weights,
                total,
                lr,
                val_acc,
            });
            // Ties keep the later model, which is the one the drift window saw
            // last; only a strict gain resets patience.
            let improved = best.as_ref().is_none_or(|b| val_acc > b.0);
            if best.as_ref().is_none_or(|b| val_acc >= b.0) {
                best = Some((val_acc, self.state.model.clone(), self.state.uw.clone()));
            }
            if improved {
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= self.cfg.patience {
                    break;
                }
            }
        }
        let (best_acc, model, uw) = best.expect("at least one epoch");
        self.state.model = model;
        self.state.uw = uw;
        Ok((epochs_run, best_acc))
    }

    fn train_step(&mut self, k: usize, split: &PreparedSplit, idx: &[usize], opt: &mut AdamW) -> Result<StepLog> {
        let tape = Tape::new();
        let st = &mut self.state;
        let vars = st.model.vars(&tape, true);
        let blocks = self.data.backbone.block_vars(&tape);
        let head = st.model.head.vars(&tape);
        let fwd = forward(
            &tape,
            &st.model,
            &vars,
            &self.data.backbone,
            &blocks,
            split,
            idx,
            &self.opts,
        );
        let labels = split.labels_of(idx);
        let inputs = LossInputs {
            cfg: &self.cfg,
            stage: k,
            fwd: &fwd,
            vars: &vars,
            head: &head,
            labels: &labels,
            teacher: st.teacher.as_ref(),
            stats: st.stats.as_ref(),
        };
        let terms = assemble_losses(&inputs, &mut st.rng)?;
        let weighting = k > 0 && !self.cfg.dropped(Component::Uw);
        let s = weighting.then(|| st.uw.vars(&tape));
        let loss = objective(&terms, s.as_ref())?;
        let total = loss.value().item();
        if !total.is_finite() {
            return Err(HarnessError::Numerical(format!("stage {} objective is {total}", k + 1)));
        }
        let grads = tape.backward(loss)?;

        for (m, t) in st.monitors.iter_mut().zip(&fwd.traces) {
            m.record(&usage_matrix(&t.routing, &st.model.pool))?;
        }
        update_model(&mut st.model, opt, &grads, &vars, &head);
        if let Some(s) = &s {
            update_log_vars(&mut st.uw, opt, &grads, s);
        }
        if self.opts.enhance && !fwd.traces.is_empty() {
            let q = stack_rows(fwd.traces.iter().map(|t| t.query))?;
            let e = stack_rows(fwd.traces.iter().map(|t| t.enhanced))?;
            write_memory_ema(&mut st.model.bank, &q, &e)?;
        }
        Ok(StepLog {
            losses: terms.iter().map(|(t, v)| (*t, v.value().item())).collect(),
            total,
        })
    }
}
