//! The `BFRC` checkpoint container.
//!
//! Layout, all integers little-endian: magic `BFRC`, `u32` format version,
//! `u64` config length and config JSON bytes, `u64` tensor count, then per
//! tensor `u32` name length, name bytes, `u32` rank, `u64` extents and `f64`
//! values. A CRC-32 of everything before it closes the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderConfig, FrozenEncoderSet};
use crate::error::{Error, Result};
use crate::model::{BrewClipParams, ModelMode};
use crate::numerics::Tensor;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"BFRC";
pub const FORMAT_VERSION: u32 = 1;
const FROZEN_PREFIXES: [&str; 3] = ["image.", "text.", "audio."];

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub tensors: ParamStore,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: wanted {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.tensors.to_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a BFRC checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!(
                "CRC mismatch: file says {stored:08x}, contents hash to {actual:08x}; the file is corrupt"
            )));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let n = r.len()?;
        let config_json = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let count = r.len()?;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.len()).collect::<Result<_>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("payload overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { config_json, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Pretrained encoders only.
    Frozen,
    /// Encoders plus a mode's trainable parameters.
    Model,
}

/// The JSON stored in a checkpoint's config slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub mode: Option<ModelMode>,
    pub encoder: EncoderConfig,
    pub step: u64,
    pub best_r1: Option<f64>,
    /// Echo of the run configuration that produced the checkpoint.
    pub run: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(kind: CheckpointKind, mode: Option<ModelMode>, encoder: EncoderConfig, run: serde_json::Value) -> Self {
        Self { format_version: FORMAT_VERSION, kind, mode, encoder, step: 0, best_r1: None, run }
    }
}

fn is_frozen(name: &str) -> bool {
    FROZEN_PREFIXES.iter().any(|p| name.starts_with(p))
}

pub fn frozen_checkpoint(set: &FrozenEncoderSet, meta: &CheckpointMeta) -> Result<Checkpoint> {
    Ok(Checkpoint { config_json: serde_json::to_string(meta)?, tensors: set.store.clone() })
}

pub fn model_checkpoint(params: &BrewClipParams, meta: &CheckpointMeta) -> Result<Checkpoint> {
    let mut tensors = params.frozen.store.clone();
    tensors.extend(params.trainable.clone());
    Ok(Checkpoint { config_json: serde_json::to_string(meta)?, tensors })
}

impl Checkpoint {
    pub fn meta(&self) -> Result<CheckpointMeta> {
        serde_json::from_str(&self.config_json)
            .map_err(|e| Error::Checkpoint(format!("config JSON does not describe a checkpoint: {e}")))
    }

    /// The frozen encoders stored in any checkpoint kind.
    pub fn frozen_set(&self) -> Result<FrozenEncoderSet> {
        let meta = self.meta()?;
        let mut store = ParamStore::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| is_frozen(n)) {
            store.insert(name.clone(), t.clone());
        }
        let set = FrozenEncoderSet { config: meta.encoder, store };
        let expected = FrozenEncoderSet::init(&meta.encoder, 0)?;
        for (name, t) in expected.store.iter() {
            let got = set.store.get(name).map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        Ok(set)
    }

    /// Full model parameters; requires a model checkpoint.
    pub fn params(&self) -> Result<BrewClipParams> {
        let meta = self.meta()?;
        let mode = match (meta.kind, meta.mode) {
            (CheckpointKind::Model, Some(m)) => m,
            _ => return Err(Error::Checkpoint("not a model checkpoint".into())),
        };
        let frozen = self.frozen_set()?;
        let template = BrewClipParams::new(frozen.clone(), mode, 0);
        let mut trainable = ParamStore::new();
        for (name, t) in template.trainable.iter() {
            let got = self.tensors.get(name).map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("tensor `{name}` has shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
            trainable.insert(name.clone(), got.clone());
        }
        Ok(BrewClipParams { mode, frozen, trainable })
    }
}
