//! Run configuration.
//!
//! One JSON document drives every command. All fields have defaults, so an
//! empty object `{}` is a valid config; unknown keys are rejected to catch
//! typos early. Validation reports the offending field by name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ablate::AblateConfig;
use crate::model::{ContextConfig, HeadConfig};
use crate::org::OrgConfig;
use crate::synth::SynthConfig;

/// Which training variant to run: single-frame regression or multi-frame
/// regression with relative-pose consistency terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[serde(rename = "orgposenet")]
    OrgPoseNet,
    #[serde(rename = "orgmapnet")]
    OrgMapNet,
}

impl Variant {
    /// Default mini-batch size when the config does not pin one. The
    /// multi-frame variant counts tuples, not frames.
    pub fn default_batch_size(self) -> usize {
        match self {
            Variant::OrgPoseNet => 64,
            Variant::OrgMapNet => 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    /// Frames (single-frame variant) or tuples (multi-frame) per step;
    /// `None` uses the variant default.
    pub batch_size: Option<usize>,
    /// Epoch at which the learning rate is multiplied by `lr_drop`;
    /// `None` means halfway through `epochs`.
    pub lr_drop_epoch: Option<u64>,
    pub lr_drop: f64,
    /// Write a checkpoint every this many epochs (plus one at the end).
    pub checkpoint_every: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            weight_decay: 5e-4,
            epochs: 100,
            batch_size: None,
            lr_drop_epoch: None,
            lr_drop: 0.1,
            checkpoint_every: 25,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optim.lr", "must be positive and finite"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("optim.weight_decay", "must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("optim.epochs", "must be at least 1"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("optim.batch_size", "must be at least 1"));
        }
        if !(self.lr_drop > 0.0 && self.lr_drop <= 1.0) {
            return Err(Error::config("optim.lr_drop", "must be in (0, 1]"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("optim.checkpoint_every", "must be at least 1"));
        }
        Ok(())
    }

    /// The epoch index where the learning-rate drop kicks in.
    pub fn drop_epoch(&self) -> u64 {
        self.lr_drop_epoch.unwrap_or(self.epochs / 2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Initial value of the learnable translation log-weight.
    pub beta0: f64,
    /// Initial value of the learnable rotation log-weight.
    pub gamma0: f64,
    /// Frames per tuple in the multi-frame variant.
    pub s: usize,
    /// Frame gap inside a tuple.
    pub k_f: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta0: 0.0,
            gamma0: -3.0,
            s: 3,
            k_f: 10,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, variant: Variant) -> Result<()> {
        if !self.beta0.is_finite() || !self.gamma0.is_finite() {
            return Err(Error::config("loss.beta0", "weights must be finite"));
        }
        if variant == Variant::OrgMapNet && self.s < 2 {
            return Err(Error::config(
                "loss.s",
                "multi-frame variant needs tuples of at least 2 frames",
            ));
        }
        if self.s == 0 {
            return Err(Error::config("loss.s", "must be at least 1"));
        }
        if self.k_f == 0 {
            return Err(Error::config("loss.k_f", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory containing `manifest.json` and `frames.jsonl`.
    pub dataset_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Option<Variant>,
    pub seed: u64,
    pub org: OrgConfig,
    pub context: ContextConfig,
    pub head: HeadConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn variant(&self) -> Variant {
        self.variant.unwrap_or(Variant::OrgPoseNet)
    }

    pub fn batch_size(&self) -> usize {
        self.optim
            .batch_size
            .unwrap_or_else(|| self.variant().default_batch_size())
    }

    pub fn validate(&self) -> Result<()> {
        self.org.validate()?;
        self.context.validate()?;
        self.head.validate()?;
        self.optim.validate()?;
        self.loss.validate(self.variant())?;
        self.synth.validate()?;
        self.ablate.validate()?;
        Ok(())
    }

    /// Reads and validates a config file. A missing file maps to a
    /// missing-input error; JSON or schema problems map to config errors
    /// naming the line.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let body = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingInput(path.display().to_string())
            } else {
                Error::Io(e)
            }
        })?;
        let cfg: RunConfig = serde_json::from_str(&body).map_err(|e| {
            Error::config(
                "config",
                format!("{} (line {})", e, e.line()),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Config as a JSON value, for embedding into checkpoints.
    pub fn to_value(&self) -> Result<serde_json::Value> {
        serde_json::to_value(self).map_err(|e| Error::Internal(format!("config to value: {e}")))
    }

    /// Rebuilds a config from the JSON embedded in a checkpoint.
    pub fn from_value(v: serde_json::Value) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(v)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        cfg.validate()
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        Ok(cfg)
    }
}
