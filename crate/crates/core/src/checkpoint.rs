//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "RELMEMCK"
//! version   u32
//! meta_len  u64
//! meta      meta_len bytes of JSON (config, labels, vocab, BPE model,
//!           memory slots and shape, training summary)
//! count     u32
//! count x { name_len u32, name bytes, len u64, len x f64 }
//! ```
//!
//! Tensor names: `param/<registry name>`, `frozen/word_table`,
//! `frozen/static_words`, `memory/keys`, `memory/coefficients`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{BpeModel, LabelSpace, Vocab};
use crate::embedding::WordSource;
use crate::error::{Error, Result};
use crate::memory::{MemoryStore, SlotInfo};
use crate::model::Model;

pub const MAGIC: &[u8; 8] = b"RELMEMCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryMeta {
    pub key_dim: usize,
    pub fixed: bool,
    pub slots: Vec<SlotInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub config: TrainConfig,
    pub labels: LabelSpace,
    pub vocab: Option<Vocab>,
    pub bpe: BpeModel,
    pub contextual_input_dim: usize,
    pub memory: Option<MemoryMeta>,
    pub best_epoch: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub memory: Option<MemoryStore>,
    pub best_epoch: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn save(path: impl AsRef<Path>, model: &Model, memory: Option<&MemoryStore>, best_epoch: usize) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, model, memory, best_epoch).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_to(w: &mut impl Write, model: &Model, memory: Option<&MemoryStore>, best_epoch: usize) -> Result<()> {
    let meta = Meta {
        config: model.config.clone(),
        labels: model.labels.clone(),
        vocab: model.vocab().cloned(),
        bpe: model.embedder.bpe.clone(),
        contextual_input_dim: model.embedder.config.contextual_input_dim,
        memory: memory.map(|m| MemoryMeta {
            key_dim: m.key_dim(),
            fixed: m.is_fixed(),
            slots: m.slots().to_vec(),
        }),
        best_epoch,
    };
    let json = serde_json::to_vec(&meta).map_err(|e| corrupt(format!("encoding metadata: {e}")))?;

    let mut tensors: Vec<(String, &[f64])> = model
        .params
        .iter()
        .map(|(_, name, p)| (format!("param/{name}"), p.data.as_slice()))
        .collect();
    if let Some(d) = model.frozen_words() {
        tensors.push(("frozen/word_table".into(), d));
    }
    if let Some(d) = &model.static_words {
        tensors.push(("frozen/static_words".into(), d));
    }
    if let Some(m) = memory {
        tensors.push(("memory/keys".into(), m.keys()));
        tensors.push(("memory/coefficients".into(), m.coefficients()));
    }

    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, data) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(data.len() as u64).to_le_bytes()).map_err(io)?;
        for v in data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(&mut BufReader::new(file)).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| corrupt(format!("truncated while reading {what}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r, what)?))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r, what)?))
}

fn read_bytes(r: &mut impl Read, len: u64, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf).map_err(|_| corrupt(format!("truncated while reading {what}")))?;
    if buf.len() as u64 != len {
        return Err(corrupt(format!("truncated while reading {what}")));
    }
    Ok(buf)
}

pub fn read_from(r: &mut impl Read) -> Result<Checkpoint> {
    if &read_exact::<8>(r, "magic")? != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}, expected {VERSION}")));
    }
    let meta_len = read_u64(r, "metadata length")?;
    let meta: Meta = serde_json::from_slice(&read_bytes(r, meta_len, "metadata")?)
        .map_err(|e| corrupt(format!("bad metadata: {e}")))?;
    let count = read_u32(r, "tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(r, "tensor name length")?;
        let name = String::from_utf8(read_bytes(r, name_len as u64, "tensor name")?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let len = read_u64(r, &name)?;
        let raw = read_bytes(r, len.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?, &name)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if tensors.insert(name.clone(), data).is_some() {
            return Err(corrupt(format!("duplicate tensor {name}")));
        }
    }
    restore(meta, tensors)
}

fn restore(meta: Meta, mut tensors: BTreeMap<String, Vec<f64>>) -> Result<Checkpoint> {
    let mut labels = meta.labels;
    labels.reindex();
    let mut vocab = meta.vocab.unwrap_or_default();
    vocab.reindex();
    let mut bpe = meta.bpe;
    bpe.reindex();
    let mut model = Model::new(meta.config, labels, vocab, bpe, None, meta.contextual_input_dim)?;

    let mut take = |name: &str, len: usize| -> Result<Vec<f64>> {
        let data = tensors.remove(name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if data.len() != len {
            return Err(corrupt(format!("tensor {name} has {} values, expected {len}", data.len())));
        }
        Ok(data)
    };
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = format!("param/{}", model.params.name(id));
        let len = model.params.get(id).data.len();
        model.params.get_mut(id).data = take(&name, len)?;
    }
    if let Some(words) = model.embedder.words.as_mut() {
        if let WordSource::Frozen(d) = &mut words.source {
            *d = take("frozen/word_table", d.len())?;
        }
    }
    if let Some(s) = model.static_words.as_mut() {
        *s = take("frozen/static_words", s.len())?;
    }
    let memory = match meta.memory {
        Some(m) => {
            let n = m.slots.len();
            let keys = take("memory/keys", n * m.key_dim)?;
            let coefficients = take("memory/coefficients", n)?;
            if m.key_dim != model.key_dim() {
                return Err(corrupt(format!("memory key width {} does not match model {}", m.key_dim, model.key_dim())));
            }
            Some(MemoryStore::from_parts(
                m.slots,
                m.key_dim,
                model.labels.num_relations(),
                keys,
                coefficients,
                m.fixed,
            )?)
        }
        None => None,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint {
        model,
        memory,
        best_epoch: meta.best_epoch,
    })
}
