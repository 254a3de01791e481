//! Run configuration and the snapshot embedded in checkpoints.
//!
//! A run is described by one TOML file. Every section is optional and falls
//! back to its defaults; unknown keys anywhere are rejected.
//!
//! ```toml
//! [synth]              # training pairs written by `specrr synth`
//! count = 256
//! [held_out]           # evaluation pairs (`specrr synth --split held-out`)
//! seed = 1
//! [codebook]           # spectral prior architecture and VQ settings
//! k = 64
//! [codebook_training]
//! steps = 2000
//! [model]              # removal network and its component toggles
//! channels = 32
//! [train]
//! steps = 3000
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codebook::CodebookConfig;
use crate::error::{Error, Result};
use crate::pipeline::{ModelConfig, TrainConfig};
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Initialize codes by k-means over encoder features before training.
    pub kmeans_init: bool,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for CodebookTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            seed: 0,
            kmeans_init: true,
            log_every: 50,
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub held_out: SynthConfig,
    pub codebook: CodebookConfig,
    pub codebook_training: CodebookTrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            held_out: SynthConfig {
                count: 32,
                seed: 1,
                ..SynthConfig::default()
            },
            codebook: CodebookConfig::default(),
            codebook_training: CodebookTrainConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.held_out.validate()?;
        self.codebook.validate()?;
        self.model.validate()?;
        if self.codebook_training.batch_size == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.model.needs_spectrum() {
            let (m, c) = (&self.model, &self.codebook);
            if (m.k, m.n_z, m.vq_mode) != (c.k, c.n_z, c.mode) {
                return Err(Error::Config(format!(
                    "model expects a codebook with k = {}, n_z = {}, mode {:?}; [codebook] has k = {}, n_z = {}, mode {:?}",
                    m.k, m.n_z, m.vq_mode, c.k, c.n_z, c.mode
                )));
            }
        }
        Ok(())
    }
}

/// What a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Codebook,
    Removal,
}

/// Training progress stored next to the tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSnapshot {
    pub step: u64,
    pub optimizer_step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_ema: Option<f64>,
}

/// The text trailer of a checkpoint file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Snapshot {
    pub kind: CheckpointKind,
    pub state: StateSnapshot,
    pub config: RunConfig,
}

impl Snapshot {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("checkpoint config snapshot: {e}")))
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn flat<S: Serialize>(prefix: &str, v: &S) -> Result<BTreeMap<String, String>> {
    let v = toml::Value::try_from(v).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = BTreeMap::new();
    flatten(prefix, &v, &mut out);
    Ok(out)
}

/// Key-by-key differences between two serializable values, one line per
/// key as `key: checkpoint = a, config = b`. Empty when they agree.
pub fn config_diff<S: Serialize>(prefix: &str, checkpoint: &S, requested: &S) -> Result<Vec<String>> {
    let (a, b) = (flat(prefix, checkpoint)?, flat(prefix, requested)?);
    let none = "(unset)".to_string();
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    Ok(keys
        .into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| {
            format!(
                "{k}: checkpoint = {}, config = {}",
                a.get(k).unwrap_or(&none),
                b.get(k).unwrap_or(&none)
            )
        })
        .collect())
}

/// Fail with [`Error::IncompatibleCheckpoint`] listing every differing key.
pub fn require_same<S: Serialize>(prefix: &str, checkpoint: &S, requested: &S) -> Result<()> {
    let diff = config_diff(prefix, checkpoint, requested)?;
    if diff.is_empty() {
        return Ok(());
    }
    let mut msg = String::new();
    for line in diff {
        let _ = writeln!(msg, "  {line}");
    }
    Err(Error::IncompatibleCheckpoint(msg))
}

/// The parts of a removal run that must agree for a checkpoint to resume.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResumeKey {
    pub codebook: CodebookConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Everything except the step budget and the eval/checkpoint cadence.
pub fn resume_key(cfg: &RunConfig) -> ResumeKey {
    ResumeKey {
        codebook: cfg.codebook.clone(),
        model: cfg.model.clone(),
        train: TrainConfig {
            steps: 0,
            eval_every: 0,
            checkpoint_every: 0,
            ..cfg.train.clone()
        },
    }
}
