//! Run configuration: a JSON file, strict field checking, and dotted-path
//! command-line overrides applied before deserialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Deterministic Gaussian blobs generated in memory.
    Synth {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        data_seed: u64,
    },
    /// CSV files with the label in the last column.
    Csv { train: String, test: String },
    /// IDX image/label file pairs.
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
    },
}

fn default_spread() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Architecture name: `mlp-s` or `cnn-s`.
    pub arch: String,
    pub dataset: DatasetSpec,
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Membrane leak factor.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Firing threshold.
    #[serde(default = "default_v_th")]
    pub v_th: f64,
    /// Normalizer scale multiplier on top of the firing threshold.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Quantization-error exponent.
    #[serde(default = "default_p")]
    pub p: f64,
    /// Peak weight of the scheduled membrane penalty; 0 disables it.
    #[serde(default = "default_k")]
    pub k: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    /// Standardize features with training-split statistics.
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// Window half-width of the information-loss estimate.
    #[serde(default = "default_kl_epsilon")]
    pub kl_epsilon: f64,
    /// Midpoint-rule bins per window of the information-loss estimate.
    #[serde(default = "default_kl_bins")]
    pub kl_bins: usize,
    #[serde(default)]
    pub checkpoint_out: Option<String>,
    #[serde(default)]
    pub report_out: Option<String>,
}

fn default_timesteps() -> usize {
    4
}
fn default_epochs() -> usize {
    60
}
fn default_batch_size() -> usize {
    64
}
fn default_base_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_tau() -> f64 {
    0.25
}
fn default_v_th() -> f64 {
    0.5
}
fn default_alpha() -> f64 {
    1.0
}
fn default_p() -> f64 {
    2.0
}
fn default_k() -> f64 {
    0.1
}
fn default_bn_eps() -> f64 {
    1e-5
}
fn default_bn_momentum() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}
fn default_kl_epsilon() -> f64 {
    0.05
}
fn default_kl_bins() -> usize {
    200
}

impl TrainConfig {
    /// Field-level sanity checks beyond what deserialization enforces.
    /// Constructor validation downstream repeats some of these; checking
    /// here names the config field in the message.
    pub fn validate(&self) -> Result<()> {
        if self.arch != "mlp-s" && self.arch != "cnn-s" {
            return Err(Error::Param(format!(
                "arch must be \"mlp-s\" or \"cnn-s\", got {:?}",
                self.arch
            )));
        }
        if self.timesteps == 0 {
            return Err(Error::Param("timesteps must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Param(format!(
                "base_lr must be positive and finite, got {}",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Param(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Param(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if !(self.v_th > 0.0 && self.v_th.is_finite()) {
            return Err(Error::Param(format!(
                "v_th must be positive and finite, got {}",
                self.v_th
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Param(format!(
                "alpha must be positive and finite, got {}",
                self.alpha
            )));
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(Error::Param(format!(
                "p must be positive and finite, got {}",
                self.p
            )));
        }
        if !(self.k >= 0.0 && self.k.is_finite()) {
            return Err(Error::Param(format!(
                "k must be nonnegative and finite, got {}",
                self.k
            )));
        }
        if !(self.bn_eps > 0.0 && self.bn_eps.is_finite()) {
            return Err(Error::Param(format!(
                "bn_eps must be positive and finite, got {}",
                self.bn_eps
            )));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Param(format!(
                "bn_momentum must lie in [0, 1), got {}",
                self.bn_momentum
            )));
        }
        if !(self.kl_epsilon > 0.0 && self.kl_epsilon < 0.5) {
            return Err(Error::Param(format!(
                "kl_epsilon must lie in (0, 0.5), got {}",
                self.kl_epsilon
            )));
        }
        if self.kl_bins < 10 {
            return Err(Error::Param(format!(
                "kl_bins must be at least 10, got {}",
                self.kl_bins
            )));
        }
        match &self.dataset {
            DatasetSpec::Synth {
                classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
                ..
            } => {
                if *classes < 2 {
                    return Err(Error::Param(
                        "dataset.classes must be at least 2".into(),
                    ));
                }
                if *dim < 2 {
                    return Err(Error::Param("dataset.dim must be at least 2".into()));
                }
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(Error::Param(
                        "dataset per-class counts must be at least 1".into(),
                    ));
                }
                if !(*spread > 0.0 && spread.is_finite()) {
                    return Err(Error::Param(format!(
                        "dataset.spread must be positive and finite, got {spread}"
                    )));
                }
            }
            DatasetSpec::Csv { .. } | DatasetSpec::Idx { .. } => {}
        }
        Ok(())
    }

    /// Parses a config from a JSON value, then validates it.
    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_value(value)
            .map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a JSON config file, applies `key=value` overrides onto the raw
    /// document first, then deserializes strictly.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        apply_overrides(&mut value, overrides)?;
        Self::from_value(value)
    }
}

/// Applies `dotted.path=json_or_string` overrides to a JSON document.
/// The value side is parsed as JSON when possible and falls back to a plain
/// string, so `k=0.2`, `standardize=false`, and `arch=mlp-s` all work.
pub fn apply_overrides(value: &mut serde_json::Value, overrides: &[String]) -> Result<()> {
    for ov in overrides {
        let (path, raw) = ov.split_once('=').ok_or_else(|| {
            Error::Usage(format!("override {ov:?} is not of the form key=value"))
        })?;
        if path.is_empty() {
            return Err(Error::Usage(format!("override {ov:?} has an empty key")));
        }
        let new: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut node = &mut *value;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            if part.is_empty() {
                return Err(Error::Usage(format!(
                    "override key {path:?} has an empty segment"
                )));
            }
            // The match moves the reference so it can be reassigned below;
            // `as_object_mut` would hold a borrow across iterations.
            let obj = match node {
                serde_json::Value::Object(map) => map,
                _ => {
                    return Err(Error::Usage(format!(
                        "override key {path:?} descends into a non-object at {:?}",
                        parts[..i].join(".")
                    )))
                }
            };
            if i + 1 == parts.len() {
                obj.insert(part.to_string(), new.clone());
                break;
            }
            node = obj
                .entry(part.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
    }
    Ok(())
}
