//! Binary checkpoint: `WGEN`, u32 version, a length-prefixed JSON metadata
//! block, length-prefixed tensor records, and a trailing FNV-1a 64 checksum
//! of every preceding byte. All integers and values are little-endian.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use serde_json::Value;

use super::AdamState;
use crate::error::{Result, WegenError};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WGEN";
pub const CHECKPOINT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form snapshot of the configuration that produced the tensors.
    pub config: Value,
    pub best_metric: Option<f64>,
    pub adam_step: u64,
    /// Model tensors followed by optimizer moments named `adam.m.*` and
    /// `adam.v.*`.
    pub records: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(config: Value) -> Self {
        Checkpoint {
            config,
            best_metric: None,
            adam_step: 0,
            records: Vec::new(),
        }
    }

    /// Appends every tensor of `store`, skipping names already present.
    pub fn add_store(&mut self, store: &ParamStore) {
        for id in store.ids() {
            let name = store.name(id);
            if self.get(name).is_none() {
                self.records.push(TensorRecord {
                    name: name.to_string(),
                    trainable: store.is_trainable(id),
                    value: store.get(id).clone(),
                });
            }
        }
    }

    pub fn add_adam(&mut self, store: &ParamStore, state: &AdamState) {
        self.adam_step = state.t;
        for (prefix, moments) in [(ADAM_M, &state.m), (ADAM_V, &state.v)] {
            for (id, t) in moments {
                self.records.push(TensorRecord {
                    name: format!("{prefix}{}", store.name(*id)),
                    trainable: false,
                    value: t.clone(),
                });
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|r| r.name == name).map(|r| &r.value)
    }

    /// Overwrites every parameter of `store` with the record of the same
    /// name. Missing names and shape differences are errors.
    pub fn restore_store(&self, store: &mut ParamStore) -> Result<()> {
        let by_name: BTreeMap<&str, &Tensor> = self.records.iter().map(|r| (r.name.as_str(), &r.value)).collect();
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| WegenError::CorruptCheckpoint(format!("missing tensor {name:?}")))?;
            if t.shape() != store.get(id).shape() {
                return Err(WegenError::CorruptCheckpoint(format!(
                    "tensor {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    store.get(id).shape()
                )));
            }
            store.set(id, (*t).clone())?;
        }
        Ok(())
    }

    /// Rebuilds optimizer moments for the parameters of `store`.
    pub fn restore_adam(&self, store: &ParamStore) -> AdamState {
        let mut state = AdamState {
            t: self.adam_step,
            ..AdamState::default()
        };
        for id in store.ids() {
            let name = store.name(id);
            if let Some(m) = self.get(&format!("{ADAM_M}{name}")) {
                state.m.insert(id, m.clone());
            }
            if let Some(v) = self.get(&format!("{ADAM_V}{name}")) {
                state.v.insert(id, v.clone());
            }
        }
        state
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::json!({
            "config": self.config,
            "best_metric": self.best_metric,
            "adam_step": self.adam_step,
        });
        let meta = serde_json::to_vec(&meta)
            .map_err(|e| WegenError::InvalidArgument(format!("cannot serialize checkpoint metadata: {e}")))?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(u8::from(r.trainable));
            out.extend_from_slice(&(r.value.rank() as u32).to_le_bytes());
            for &d in r.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in r.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| WegenError::CorruptCheckpoint(m.to_string());
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing WGEN header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(WegenError::CheckpointVersion {
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(corrupt("file is truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if stored != checksum(body) {
            return Err(corrupt("checksum mismatch (file truncated or modified)"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let meta_len = r.u64()? as usize;
        let meta: Value =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupt(&format!("bad metadata: {e}")))?;
        let count = r.u64()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let trainable = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("shape overflow"))?;
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| corrupt("shape overflow"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            records.push(TensorRecord {
                name,
                trainable,
                value: Tensor::new(&shape, data)?,
            });
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after tensor records"));
        }
        Ok(Checkpoint {
            config: meta.get("config").cloned().unwrap_or(Value::Null),
            best_metric: meta.get("best_metric").and_then(Value::as_f64),
            adam_step: meta.get("adam_step").and_then(Value::as_u64).unwrap_or(0),
            records,
        })
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| WegenError::CorruptCheckpoint("record runs past the end of the file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| WegenError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| WegenError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
