//! The CKP1 checkpoint container.
//!
//! Layout, all integers u32 little-endian:
//!
//! ```text
//! "CKP1" | count | count × (name_len | name | rank | dims… | f32 payload) | config text
//! ```
//!
//! The config text runs to the end of the file.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::codebook::{CodebookModel, CodebookTrainer};
use crate::config::{CheckpointKind, RunConfig, Snapshot, StateSnapshot};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::pipeline::{LossComponents, RemovalModel, TrainState};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CKP1";

const FIRST_MOMENT: &str = "adam.first.";
const SECOND_MOMENT: &str = "adam.second.";
const LAST_USED: &str = "state.last_used";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub config: String,
}

fn parse_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::RejectedInput(format!("{what} {v} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(parse_err(self.bytes.len(), format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

impl Checkpoint {
    pub fn new(config: impl Into<String>) -> Self {
        Self {
            tensors: Vec::new(),
            config: config.into(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::RejectedInput(format!("duplicate checkpoint entry `{name}`")));
        }
        self.tensors.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&u32_of(self.tensors.len(), "entry count")?);
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::RejectedInput(format!("duplicate checkpoint entry `{name}`")));
            }
            out.extend_from_slice(&u32_of(name.len(), "name length")?);
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_of(t.rank(), "rank")?);
            for d in t.shape() {
                out.extend_from_slice(&u32_of(*d, "dimension")?);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(self.config.as_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(parse_err(0, "bad magic, expected `CKP1`"));
        }
        let mut r = Reader { bytes, pos: 4 };
        let count = r.u32("entry count")?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32("name length")?;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| parse_err(at + 4, "entry name is not UTF-8"))?
                .to_string();
            let rank = r.u32("rank")?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, d| a.checked_mul(*d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| parse_err(at, "tensor size overflows"))?;
            let data = r
                .take(n, "tensor payload")?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if ck.get(&name).is_some() {
                return Err(parse_err(at, format!("duplicate entry `{name}`")));
            }
            ck.tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        ck.config = String::from_utf8(bytes[r.pos..].to_vec())
            .map_err(|_| parse_err(r.pos, "config snapshot is not UTF-8"))?;
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        // write-then-rename so an interrupted save never clobbers the last good file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Append every tensor of `store` under its own name.
    pub fn push_store<T: Scalar>(&mut self, store: &ParamStore<T>) -> Result<()> {
        for (_, name, t) in store.iter() {
            self.push(name, t.cast())?;
        }
        Ok(())
    }

    /// Overwrite every parameter of `store` from the entry of the same name.
    pub fn load_store<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{name}`")))?;
            store.set(id, t.cast())?;
        }
        Ok(())
    }

    /// Append Adam moments as `adam.first.<param>` / `adam.second.<param>`.
    pub fn push_adam<T: Scalar>(&mut self, store: &ParamStore<T>, adam: &Adam<T>) -> Result<()> {
        for id in store.ids() {
            let i = id.index();
            if let (Some(m), Some(v)) = (&adam.first[i], &adam.second[i]) {
                self.push(format!("{FIRST_MOMENT}{}", store.name(id)), m.cast())?;
                self.push(format!("{SECOND_MOMENT}{}", store.name(id)), v.cast())?;
            }
        }
        Ok(())
    }

    /// Restore moments written by [`Checkpoint::push_adam`]; `step` comes
    /// from the config snapshot.
    pub fn load_adam<T: Scalar>(&self, store: &ParamStore<T>, adam: &mut Adam<T>, step: u64) -> Result<()> {
        *adam = Adam::new(adam.config, store.len());
        adam.step = step;
        for id in store.ids() {
            let name = store.name(id);
            adam.first[id.index()] = self.get(&format!("{FIRST_MOMENT}{name}")).map(Tensor::cast);
            adam.second[id.index()] = self.get(&format!("{SECOND_MOMENT}{name}")).map(Tensor::cast);
        }
        Ok(())
    }

    /// Entries that are not optimizer moments or other `state.` records.
    pub fn parameters(&self) -> Vec<(String, Tensor<f32>)> {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("adam.") && !n.starts_with("state."))
            .cloned()
            .collect()
    }
}

/// Save a codebook run: parameters, Adam moments, dead-code bookkeeping
/// and the resolved config.
pub fn save_codebook(path: &Path, trainer: &CodebookTrainer<f32>, config: &RunConfig) -> Result<()> {
    let snapshot = Snapshot {
        kind: CheckpointKind::Codebook,
        state: StateSnapshot {
            step: trainer.step,
            optimizer_step: trainer.optimizer.step,
            loss_ema: None,
        },
        config: config.clone(),
    };
    let mut ck = Checkpoint::new(snapshot.to_toml()?);
    ck.push_store(&trainer.model.store)?;
    ck.push_adam(&trainer.model.store, &trainer.optimizer)?;
    // steps are stored as f32, exact below 2^24
    if trainer.step >= 1 << 24 {
        return Err(Error::RejectedInput(format!("step {} too large to checkpoint", trainer.step)));
    }
    let used = trainer.last_used.iter().map(|&s| s as f32).collect();
    ck.push(LAST_USED, Tensor::from_vec(&[trainer.last_used.len()], used)?)?;
    ck.write(path)
}

/// Read the snapshot of any checkpoint file.
pub fn read_snapshot(ck: &Checkpoint) -> Result<Snapshot> {
    Snapshot::from_toml(&ck.config)
}

pub fn load_codebook(path: &Path) -> Result<(CodebookTrainer<f32>, Snapshot)> {
    let ck = Checkpoint::read(path)?;
    let snap = read_snapshot(&ck)?;
    snap.expect_kind(CheckpointKind::Codebook)?;
    let cfg = &snap.config;
    let mut model = CodebookModel::<f32>::new(cfg.codebook.clone(), cfg.codebook_training.seed)?;
    ck.load_store(&mut model.store)?;
    let mut trainer = CodebookTrainer::new(model, cfg.codebook_training.seed);
    ck.load_adam(&trainer.model.store, &mut trainer.optimizer, snap.state.optimizer_step)?;
    trainer.step = snap.state.step;
    let used = ck
        .get(LAST_USED)
        .ok_or_else(|| Error::Config(format!("checkpoint lacks `{LAST_USED}`")))?;
    if used.numel() != trainer.last_used.len() {
        return Err(Error::Config(format!(
            "`{LAST_USED}` has {} entries, expected {}",
            used.numel(),
            trainer.last_used.len()
        )));
    }
    trainer.last_used = used.data().iter().map(|&v| v as u64).collect();
    Ok((trainer, snap))
}

pub fn save_removal(path: &Path, model: &RemovalModel<f32>, state: &TrainState<f32>, config: &RunConfig) -> Result<()> {
    let snapshot = Snapshot {
        kind: CheckpointKind::Removal,
        state: StateSnapshot {
            step: state.step,
            optimizer_step: state.optimizer.step,
            loss_ema: Some(state.loss_ema),
        },
        config: RunConfig {
            model: model.config.clone(),
            ..config.clone()
        },
    };
    let mut ck = Checkpoint::new(snapshot.to_toml()?);
    ck.push_store(&model.store)?;
    ck.push_adam(&model.store, &state.optimizer)?;
    ck.write(path)
}

/// Rebuild a removal model and its training state. The frozen codebook
/// travels inside the checkpoint, so no separate prior file is needed.
pub fn load_removal(path: &Path) -> Result<(RemovalModel<f32>, TrainState<f32>, Snapshot)> {
    let ck = Checkpoint::read(path)?;
    let snap = read_snapshot(&ck)?;
    snap.expect_kind(CheckpointKind::Removal)?;
    let cfg = &snap.config;
    let prior = if cfg.model.needs_spectrum() {
        let mut m = CodebookModel::<f32>::new(cfg.codebook.clone(), 0)?;
        for id in m.store.ids().collect::<Vec<_>>() {
            let name = m.store.name(id).to_string();
            let t = ck
                .get(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks codebook tensor `{name}`")))?;
            m.store.set(id, t.clone())?;
        }
        Some(m)
    } else {
        None
    };
    let mut model = RemovalModel::new(cfg.model.clone(), prior.as_ref())?;
    model.load_tensors(&ck.parameters())?;
    let mut state = TrainState::new(&model, cfg.train.adam);
    ck.load_adam(&model.store, &mut state.optimizer, snap.state.optimizer_step)?;
    state.step = snap.state.step;
    state.loss_ema = snap.state.loss_ema.unwrap_or(0.0);
    state.last = LossComponents::default();
    Ok((model, state, snap))
}
