//! Homoscedastic uncertainty weighting of the training losses.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const LOG_VAR_MIN: f64 = -3.0;
pub const LOG_VAR_MAX: f64 = 6.0;

/// The weighted loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Ce,
    Real,
    Pseudo,
    Div,
    Norm,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [
        LossTerm::Ce,
        LossTerm::Real,
        LossTerm::Pseudo,
        LossTerm::Div,
        LossTerm::Norm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Ce => "ce",
            LossTerm::Real => "real",
            LossTerm::Pseudo => "pseudo",
            LossTerm::Div => "div",
            LossTerm::Norm => "norm",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One log-variance `s_i` per loss term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyWeights {
    pub log_vars: BTreeMap<LossTerm, f64>,
}

impl Default for UncertaintyWeights {
    fn default() -> Self {
        Self {
            log_vars: LossTerm::ALL.iter().map(|&t| (t, 0.0)).collect(),
        }
    }
}

/// Tape leaves for the log-variances in use.
pub type LogVarVars<'t> = BTreeMap<LossTerm, Var<'t>>;

impl UncertaintyWeights {
    pub fn get(&self, term: LossTerm) -> f64 {
        self.log_vars.get(&term).copied().unwrap_or(0.0)
    }

    pub fn effective_weights(&self) -> BTreeMap<LossTerm, f64> {
        self.log_vars.iter().map(|(&t, &s)| (t, effective_weight(s))).collect()
    }

    pub fn vars<'t>(&self, tape: &'t Tape) -> LogVarVars<'t> {
        self.log_vars
            .iter()
            .map(|(&t, &s)| (t, tape.param(&Tensor::scalar(s))))
            .collect()
    }

    /// Projects every `s_i` back into `[−3, 6]`.
    pub fn clamp(&mut self) {
        for s in self.log_vars.values_mut() {
            *s = s.clamp(LOG_VAR_MIN, LOG_VAR_MAX);
        }
    }
}

pub fn effective_weight(s: f64) -> f64 {
    (-s).exp()
}

/// Free-function form of [`UncertaintyWeights::clamp`].
pub fn clamp_log_variances(uw: &mut UncertaintyWeights) {
    uw.clamp();
}

/// `Σᵢ (exp(−sᵢ)·Lᵢ + sᵢ)` over the supplied terms.
pub fn total_loss<'t>(losses: &[(LossTerm, Var<'t>)], s: &LogVarVars<'t>) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for &(term, loss) in losses {
        let v = loss.value().item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss `{term}` is {v}")));
        }
        let si = *s
            .get(&term)
            .ok_or_else(|| Error::Contract(format!("no log-variance for `{term}`")))?;
        let part = loss.mul_scalar(si.scale(-1.0).exp()) + si;
        total = Some(match total {
            Some(acc) => acc + part,
            None => part,
        });
    }
    total.ok_or_else(|| Error::Contract("total loss over no terms".into()))
}

/// Unweighted sum, used where uncertainty weighting is bypassed.
pub fn plain_sum<'t>(losses: &[(LossTerm, Var<'t>)]) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for &(term, loss) in losses {
        let v = loss.value().item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss `{term}` is {v}")));
        }
        total = Some(match total {
            Some(acc) => acc + loss,
            None => loss,
        });
    }
    total.ok_or_else(|| Error::Contract("total loss over no terms".into()))
}
