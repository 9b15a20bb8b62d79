use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Toggles};
use crate::optim::AdamConfig;

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Archive { path: PathBuf },
    Synthetic { seed: u64, n_per_split: usize, spec: SynthSpec },
}

/// Validation metric used to pick the reported epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Lowest validation MAE.
    Mae,
    /// Highest validation zero-excluded binary accuracy.
    Acc2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self { beta1: a.beta1, beta2: a.beta2, eps: a.eps, weight_decay: a.weight_decay }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub epochs: usize,
    /// Stops training after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub model: ModelConfig,
    pub toggles: Toggles,
    /// `1..=L+2`; `None` means `L`.
    pub alignment_layer: Option<usize>,
    pub data: DataSource,
    pub selection: Selection,
    /// Optional JSONL weights loaded over the initialization.
    pub init_weights: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            lr: 1e-4,
            batch_size: 8,
            eval_batch_size: 32,
            epochs: 30,
            max_steps: None,
            optimizer: OptimizerConfig::default(),
            model: ModelConfig::default(),
            toggles: Toggles::default(),
            alignment_layer: None,
            data: DataSource::Synthetic { seed: 42, n_per_split: 64, spec: SynthSpec::default() },
            selection: Selection::Mae,
            init_weights: None,
        }
    }
}

impl RunConfig {
    pub fn adam(&self) -> AdamConfig {
        let o = &self.optimizer;
        AdamConfig { lr: self.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay }
    }

    /// Fills defaults that depend on other fields and validates.
    pub fn resolved(mut self) -> Result<Self> {
        if self.alignment_layer.is_none() {
            self.alignment_layer = Some(self.model.layers);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn alignment_layer(&self) -> usize {
        self.alignment_layer.unwrap_or(self.model.layers)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let k = self.alignment_layer();
        if k < 1 || k > self.model.layers + 2 {
            return bad(format!("alignment_layer must be in 1..={}, got {k}", self.model.layers + 2));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.eval_batch_size < 1 || self.epochs < 1 {
            return bad("eval_batch_size and epochs must be positive".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive when set".into());
        }
        if let DataSource::Synthetic { spec, .. } = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Applies `key=value` overrides with dotted keys. Values parse as JSON
    /// and fall back to plain strings. Unknown keys are errors.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for item in overrides {
            apply_override(&mut value, item.as_ref())?;
        }
        serde_json::from_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("override `{item}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::InvalidArgument(format!("override `{item}` has an empty key")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| Error::InvalidConfig(format!("`{}` is not an object", parts[..i].join("."))))?;
        let child = obj.get_mut(*part).ok_or_else(|| Error::InvalidConfig(format!("unknown config key `{key}`")))?;
        if i + 1 == parts.len() {
            *child = parsed;
            return Ok(());
        }
        node = child;
    }
    unreachable!("split always yields at least one part")
}
