//! Persisted per-run metrics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::Result;
use crate::eval::{EvalReport, TargetedAttackReport};
use crate::finetune::{TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedEval {
    pub encoder: String,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTargeted {
    pub encoder: String,
    pub report: TargetedAttackReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Config digest plus seed.
    pub run_id: String,
    /// Full configuration snapshot of whatever produced the run.
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub losses: Vec<f64>,
    #[serde(default)]
    pub collapse_trace: Vec<f64>,
    #[serde(default)]
    pub lrs: Vec<f64>,
    #[serde(default)]
    pub collapsed_at: Option<usize>,
    #[serde(default)]
    pub max_perturbation: f64,
    #[serde(default)]
    pub eval: Vec<NamedEval>,
    #[serde(default)]
    pub targeted: Vec<NamedTargeted>,
    /// Excluded from reproducibility comparisons.
    #[serde(default)]
    pub wall_clock_secs: f64,
    #[serde(default)]
    pub artifacts: BTreeMap<String, String>,
}

pub fn run_id(digest: &str, seed: u64) -> String {
    format!("{digest}-s{seed}")
}

impl RunRecord {
    pub fn empty(run_id: String, config: serde_json::Value) -> Self {
        Self {
            run_id,
            config,
            train: None,
            losses: Vec::new(),
            collapse_trace: Vec::new(),
            lrs: Vec::new(),
            collapsed_at: None,
            max_perturbation: 0.0,
            eval: Vec::new(),
            targeted: Vec::new(),
            wall_clock_secs: 0.0,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn from_training(config: &TrainConfig, state: &TrainState, wall_clock_secs: f64) -> Self {
        Self {
            train: Some(config.clone()),
            losses: state.losses.clone(),
            collapse_trace: state.collapse_trace.clone(),
            lrs: state.lrs.clone(),
            collapsed_at: state.collapsed_at,
            max_perturbation: state.max_perturbation,
            wall_clock_secs,
            ..Self::empty(run_id(&config.digest(), config.seed), serde_json::to_value(config).unwrap_or_default())
        }
    }

    /// `step,loss,collapse_metric,lr`, one row per update.
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("step,loss,collapse_metric,lr\n");
        for (i, loss) in self.losses.iter().enumerate() {
            let m = self.collapse_trace.get(i).copied().unwrap_or(f64::NAN);
            let lr = self.lrs.get(i).copied().unwrap_or(f64::NAN);
            out.push_str(&format!("{},{loss},{m},{lr}\n", i + 1));
        }
        out
    }

    /// Copy with the wall-clock field cleared, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
