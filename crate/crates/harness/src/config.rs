//! Experiment configuration, loaded from TOML or JSON with unknown keys
//! rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use resprompt_core::pudd::{DriftParams, ExpansionParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Components that can be switched off one at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Pseudo,
    Distill,
    Div,
    Norm,
    Uw,
    Pudd,
    QueryEnhancer,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Pseudo,
        Component::Distill,
        Component::Div,
        Component::Norm,
        Component::Uw,
        Component::Pudd,
        Component::QueryEnhancer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Pseudo => "pseudo",
            Component::Distill => "distill",
            Component::Div => "div",
            Component::Norm => "norm",
            Component::Uw => "uw",
            Component::Pudd => "pudd",
            Component::QueryEnhancer => "query-enhancer",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| HarnessError::Config(format!("unknown component `{s}`")))
    }
}

/// Parses a comma-separated component list.
pub fn parse_drops(list: &str) -> Result<Vec<Component>> {
    let mut out: Vec<Component> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Number of stages T.
    pub stages: usize,
    pub classes: usize,
    /// Backbone width D.
    pub feature_dim: usize,
    /// Raw token width of the synthetic inputs.
    pub input_dim: usize,
    /// Patch tokens per sample S.
    pub tokens: usize,
    /// Backbone depth L.
    pub layers: usize,
    pub backbone_heads: usize,
    pub mlp_hidden: usize,
    /// Prompt bottleneck d_a.
    pub bottleneck: usize,
    pub pool_size: usize,
    pub memory_slots: usize,
    pub memory_heads: usize,
    pub memory_momentum: f64,
    pub alpha: f64,
    pub lambda_r: f64,
    pub tau_s: f64,
    pub window: usize,
    pub drift_alpha: f64,
    pub drift_beta: f64,
    pub eta: f64,
    pub drift_eps: f64,
    pub d_max: f64,
    pub e_min: usize,
    pub e_max: usize,
    pub theta: f64,
    pub temperature: f64,
    /// Pseudo-features per batch; defaults to the batch size.
    pub pseudo_count: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub train_per_stage: usize,
    pub val_per_stage: usize,
    pub test_per_stage: usize,
    /// Domain-shift severity of each stage, in `[0, 1]`.
    pub severity: Vec<f64>,
    /// Scale of the class prototypes.
    pub class_separation: f64,
    /// Within-class noise of the raw tokens.
    pub sample_noise: f64,
    /// Extra noise at severity 1.
    pub shift_noise: f64,
    /// Layers that receive prompts; empty means all.
    pub layer_mask: Vec<bool>,
    /// Reset the loss log-variances at every stage.
    pub reset_uw: bool,
    pub drop: Vec<Component>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            classes: 3,
            feature_dim: 64,
            input_dim: 32,
            tokens: 16,
            layers: 4,
            backbone_heads: 4,
            mlp_hidden: 128,
            bottleneck: 32,
            pool_size: 60,
            memory_slots: 9,
            memory_heads: 4,
            memory_momentum: 0.99,
            alpha: 1.5,
            lambda_r: 0.1,
            tau_s: 0.01,
            window: 100,
            drift_alpha: 1.0,
            drift_beta: 0.5,
            eta: 0.1,
            drift_eps: 1e-10,
            d_max: 5.0,
            e_min: 10,
            e_max: 80,
            theta: 0.7,
            temperature: 2.0,
            pseudo_count: None,
            batch_size: 64,
            epochs: 8,
            patience: 5,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            seed: 0,
            train_per_stage: 2000,
            val_per_stage: 200,
            test_per_stage: 500,
            severity: vec![0.0, 0.8, 0.8],
            class_separation: 1.0,
            sample_noise: 1.0,
            shift_noise: 0.5,
            layer_mask: Vec::new(),
            reset_uw: false,
            drop: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a `.toml` or `.json` file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?,
            Some("toml") => toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?,
            _ => {
                return Err(HarnessError::Config(format!(
                    "{}: expected a .toml or .json file",
                    path.display()
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.stages < 1 || self.classes < 2 {
            return fail(format!(
                "need stages ≥ 1 and classes ≥ 2, got {} and {}",
                self.stages, self.classes
            ));
        }
        if self.severity.len() != self.stages {
            return fail(format!("{} severities for {} stages", self.severity.len(), self.stages));
        }
        if let Some(s) = self.severity.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return fail(format!("severity {s} outside [0, 1]"));
        }
        if !(self.alpha > 1.0 && self.alpha <= 2.0) {
            return fail(format!("alpha {} outside (1, 2]", self.alpha));
        }
        if !self.feature_dim.is_multiple_of(self.backbone_heads) || !self.feature_dim.is_multiple_of(self.memory_heads)
        {
            return fail("feature_dim must be divisible by both head counts".into());
        }
        if !self.layer_mask.is_empty() && self.layer_mask.len() != self.layers {
            return fail(format!(
                "layer_mask has {} entries for {} layers",
                self.layer_mask.len(),
                self.layers
            ));
        }
        if !self.layer_mask.is_empty() && !self.layer_mask.contains(&true) {
            return fail("layer_mask disables every layer".into());
        }
        if self.temperature <= 0.0 {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if self.e_min < 1 || self.e_min > self.e_max {
            return fail(format!("expansion bounds [{}, {}] invalid", self.e_min, self.e_max));
        }
        if !(0.0..=1.0).contains(&self.memory_momentum) {
            return fail(format!("memory_momentum {} outside [0, 1]", self.memory_momentum));
        }
        let positive = [
            ("feature_dim", self.feature_dim),
            ("input_dim", self.input_dim),
            ("tokens", self.tokens),
            ("layers", self.layers),
            ("bottleneck", self.bottleneck),
            ("pool_size", self.pool_size),
            ("memory_slots", self.memory_slots),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("window", self.window),
            ("train_per_stage", self.train_per_stage),
            ("val_per_stage", self.val_per_stage),
            ("test_per_stage", self.test_per_stage),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        Ok(())
    }

    pub fn dropped(&self, c: Component) -> bool {
        self.drop.contains(&c)
    }

    pub fn injects(&self, layer: usize) -> bool {
        self.layer_mask.get(layer).copied().unwrap_or(true)
    }

    pub fn pseudo_count(&self) -> usize {
        self.pseudo_count.unwrap_or(self.batch_size)
    }

    pub fn drift_params(&self) -> DriftParams {
        DriftParams {
            tau_s: self.tau_s,
            eps: self.drift_eps,
            alpha_d: self.drift_alpha,
            beta_d: self.drift_beta,
            eta: self.eta,
            window: self.window,
        }
    }

    pub fn expansion_params(&self) -> ExpansionParams {
        ExpansionParams {
            d_max: self.d_max,
            e_min: self.e_min,
            e_max: self.e_max,
        }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
