//! Run configuration shared by every command, loadable from JSON and
//! overridable with dotted `key=value` assignments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{AugPolicy, SynthSpec};
use crate::error::{ApdError, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay to zero at the last iteration.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 1000,
            batch_size: 4,
            schedule: LrSchedule::Constant,
        }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Linear => self.lr * (1.0 - iteration as f64 / self.iterations.max(1) as f64),
        }
    }
}

/// Normalization statistics used while training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainNorm {
    /// Per-batch statistics, running averages updated after each step.
    #[default]
    Batch,
    /// Running statistics throughout, which makes training a pure function of seed and parameters.
    Running,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Validate every this many iterations, and always after the last one. 0 disables validation.
    pub val_every: u64,
    pub norm: TrainNorm,
    pub augment: AugPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            val_every: 100,
            norm: TrainNorm::Batch,
            augment: AugPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset root in the `A/B/label/list` layout.
    pub data: PathBuf,
    /// Training output directory (log and checkpoints).
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Synthetic dataset generation: per-split counts plus the sample spec.
/// Sample `i` of the whole dataset uses seed `spec.seed * 1_000_003 + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub spec: SynthSpec,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            train: 32,
            val: 8,
            test: 8,
            spec: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
    pub gen_data: GenDataConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ApdError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ApdError::Config(format!("{}: {e}", path.display())))
    }

    /// Apply `key.path=value` assignments in order. Values parse as JSON when
    /// possible and as bare strings otherwise. Unknown keys are rejected.
    pub fn with_overrides<S: AsRef<str>>(&self, assignments: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self).map_err(|e| ApdError::Internal(e.to_string()))?;
        for assignment in assignments {
            let assignment = assignment.as_ref();
            let (key, raw) = assignment
                .split_once('=')
                .ok_or_else(|| ApdError::Config(format!("override `{assignment}` is not key=value")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key.trim(), parsed)?;
        }
        serde_json::from_value(value).map_err(|e| ApdError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.gen_data.spec.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) || o.weight_decay < 0.0 || o.batch_size == 0 {
            return Err(ApdError::Config(
                "optim needs lr > 0, weight_decay >= 0 and batch_size >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 {
            return Err(ApdError::Config("optim betas must lie in [0, 1) and eps must be positive".into()));
        }
        if let Some(crop) = self.train.augment.crop {
            if crop == 0 {
                return Err(ApdError::Config("train.augment.crop must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn set_path(root: &mut Value, key: &str, new: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let known = node
            .as_object()
            .map(|o| o.keys().cloned().collect::<Vec<_>>().join(", "))
            .unwrap_or_default();
        let Some(child) = node.as_object_mut().and_then(|o| o.get_mut(*part)) else {
            return Err(ApdError::Config(format!(
                "unknown config key `{}` (expected one of: {known})",
                parts[..=depth].join(".")
            )));
        };
        node = child;
    }
    *node = new;
    Ok(())
}
