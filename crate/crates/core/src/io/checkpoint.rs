//! `SDCK` checkpoints: named tensors followed by a CRC32 of every preceding
//! byte.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::tensor_file::{decode, encode_f32, TensorData};
use crate::error::{Error, Result};
use crate::nn::{AeBank, ParamStore, TaskConfig, TaskKind, TaskWeights};
use crate::tensor::Tensor;

const META_KIND: &str = "meta.task_kind";
const META_CLASSES: &str = "meta.out_channels";

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Ordered, uniquely named f32 tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("tensor name of {} bytes is too long", name.len())));
        }
        if self.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn add_store(&mut self, store: &ParamStore<f32>) -> Result<()> {
        for (name, t) in store.iter() {
            self.insert(name, t.clone())?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|e| e.0 == name).map(|e| &e.1)
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fills `store` from the same-named entries.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        store.load_from(|n| self.get(n))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        let count = u32::try_from(self.entries.len()).map_err(|_| Error::Format("too many entries".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_f32(t, &mut out)?;
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 {
            return Err(Error::Format(format!("checkpoint of {} bytes is truncated", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        if &body[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        if body[4] != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", body[4])));
        }
        let count = u32::from_le_bytes(body[5..9].try_into().expect("4 bytes")) as usize;
        let mut pos = 9;
        let mut ck = Checkpoint::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len_bytes = body.get(pos..pos + 2).ok_or_else(|| Error::Format("truncated entry".into()))?;
            let len = u16::from_le_bytes(len_bytes.try_into().expect("2 bytes")) as usize;
            pos += 2;
            let name_bytes = body.get(pos..pos + len).ok_or_else(|| Error::Format("truncated entry name".into()))?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
                .to_string();
            pos += len;
            let (data, used) = decode(&body[pos..])?;
            pos += used;
            let TensorData::F32(t) = data else {
                return Err(Error::Format(format!("entry `{name}` is not f32")));
            };
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            ck.entries.push((name, t));
        }
        if pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", body.len() - pos)));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Task weights plus the metadata needed to rebuild the architecture.
pub fn task_checkpoint(task: &TaskWeights<f32>) -> Result<Checkpoint> {
    let cfg = task.config();
    let mut ck = Checkpoint::new();
    let kind = match cfg.kind {
        TaskKind::Segmentation => 0.0,
        TaskKind::Synthesis => 1.0,
    };
    ck.insert(META_KIND, Tensor::scalar(kind))?;
    ck.insert(META_CLASSES, Tensor::scalar(cfg.out_channels as f32))?;
    ck.add_store(task.store())?;
    Ok(ck)
}

/// Task weights and AE bank in one checkpoint.
pub fn models_checkpoint(task: &TaskWeights<f32>, bank: &AeBank<f32>) -> Result<Checkpoint> {
    let mut ck = task_checkpoint(task)?;
    ck.add_store(bank.store())?;
    Ok(ck)
}

fn meta(ck: &Checkpoint, name: &str) -> Result<f32> {
    ck.get(name).ok_or_else(|| Error::MissingTensor(name.into()))?.item()
}

pub fn load_task(ck: &Checkpoint) -> Result<TaskWeights<f32>> {
    let classes = meta(ck, META_CLASSES)?;
    let cfg = match meta(ck, META_KIND)? {
        k if k == 0.0 && classes >= 1.0 => TaskConfig::segmentation(classes as usize),
        k if k == 1.0 => TaskConfig::synthesis(),
        k => return Err(Error::Format(format!("unknown task kind code {k}"))),
    };
    let mut task = TaskWeights::new(cfg, 0);
    ck.load_into(task.store_mut())?;
    Ok(task)
}

pub fn load_bank(ck: &Checkpoint, output_channels: usize) -> Result<AeBank<f32>> {
    let mut bank = AeBank::new(output_channels, 0);
    ck.load_into(bank.store_mut())?;
    Ok(bank)
}
