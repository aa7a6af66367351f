//! Binary checkpoints: `PSAN`, a version byte, a little-endian `u32` manifest
//! length, a JSON manifest, then every tensor as little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Psan;
use crate::param::ParamStore;
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"PSAN";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    AccumGradSq,
    AccumUpdateSq,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: Config,
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes<T: Real>(cfg: &Config, store: &ParamStore<T>, step: usize) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut push = |name: &str, kind, shape: &[usize], values: &[T]| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: shape.to_vec(),
            dtype: "f32".into(),
            offset: payload.len(),
        });
        for v in values {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    };
    for p in store.params() {
        push(&p.name, TensorKind::Param, p.value.shape(), p.value.data());
        push(&p.name, TensorKind::AccumGradSq, p.value.shape(), &p.accum_grad_sq);
        push(&p.name, TensorKind::AccumUpdateSq, p.value.shape(), &p.accum_update_sq);
    }
    for b in store.buffers() {
        push(&b.name, TensorKind::Buffer, &[b.value.len()], &b.value);
    }
    let manifest = Manifest { config: cfg.clone(), step, tensors, payload_bytes: payload.len() };
    let json = serde_json::to_vec(&manifest)?;
    let len = u32::try_from(json.len()).map_err(|_| ckpt_err("manifest too large"))?;
    let mut out = Vec::with_capacity(9 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits a checkpoint into its manifest and payload after integrity checks.
pub fn parse(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(ckpt_err("bad magic bytes"));
    }
    if bytes[4] != VERSION {
        return Err(ckpt_err(format!("unsupported version {} (expected {VERSION})", bytes[4])));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(9..9 + len).ok_or_else(|| ckpt_err("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| ckpt_err(format!("bad manifest: {e}")))?;
    let payload = &bytes[9 + len..];
    if payload.len() != manifest.payload_bytes {
        return Err(ckpt_err(format!(
            "payload length {} does not match the declared {} bytes",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    let mut expected = 0;
    for t in &manifest.tensors {
        if t.dtype != "f32" {
            return Err(ckpt_err(format!("{}: unsupported dtype {}", t.name, t.dtype)));
        }
        if t.offset != expected {
            return Err(ckpt_err(format!("{}: offset {} where {expected} was expected", t.name, t.offset)));
        }
        expected += 4 * t.shape.iter().product::<usize>();
    }
    if expected != manifest.payload_bytes {
        return Err(ckpt_err(format!("tensor extents cover {expected} of {} payload bytes", manifest.payload_bytes)));
    }
    Ok((manifest, payload))
}

fn read_f32s<T: Real>(payload: &[u8], entry: &TensorEntry) -> Vec<T> {
    let n: usize = entry.shape.iter().product();
    payload[entry.offset..entry.offset + 4 * n]
        .chunks_exact(4)
        .map(|b| T::from_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect()
}

/// Rebuilds the model described by the checkpoint and fills in every tensor.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(Psan, ParamStore<T>, usize)> {
    let (manifest, payload) = parse(bytes)?;
    let (mut store, model) = Psan::init::<T>(&manifest.config)?;
    let mut seen = vec![[false; 3]; store.params().len()];
    let mut seen_buf = vec![false; store.buffers().len()];
    for e in &manifest.tensors {
        let values = read_f32s::<T>(payload, e);
        if e.kind == TensorKind::Buffer {
            let id = store.buffer_id(&e.name).map_err(|_| ckpt_err(format!("unknown buffer {}", e.name)))?;
            let slot = store.buffer_mut(id);
            if e.shape != [slot.len()] {
                return Err(ckpt_err(format!("{}: shape {:?} but the model has [{}]", e.name, e.shape, slot.len())));
            }
            *slot = values;
            seen_buf[store.buffers().iter().position(|b| b.name == e.name).expect("present")] = true;
            continue;
        }
        let id = store.param_id(&e.name).map_err(|_| ckpt_err(format!("unknown parameter {}", e.name)))?;
        let p = store.param_mut(id);
        if e.shape != p.value.shape() {
            return Err(ckpt_err(format!("{}: shape {:?} but the model has {:?}", e.name, e.shape, p.value.shape())));
        }
        let k = match e.kind {
            TensorKind::Param => {
                p.value.data_mut().copy_from_slice(&values);
                0
            }
            TensorKind::AccumGradSq => {
                p.accum_grad_sq = values;
                1
            }
            TensorKind::AccumUpdateSq => {
                p.accum_update_sq = values;
                2
            }
            TensorKind::Buffer => unreachable!(),
        };
        let idx = store.params().iter().position(|q| q.name == e.name).expect("present");
        seen[idx][k] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s.iter().all(|&b| b)) {
        return Err(ckpt_err(format!("missing tensors for {}", store.params()[i].name)));
    }
    if let Some(i) = seen_buf.iter().position(|&b| !b) {
        return Err(ckpt_err(format!("missing buffer {}", store.buffers()[i].name)));
    }
    Ok((model, store, manifest.step))
}

pub fn save<T: Real>(path: &Path, cfg: &Config, store: &ParamStore<T>, step: usize) -> Result<()> {
    std::fs::write(path, to_bytes(cfg, store, step)?)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<(Psan, ParamStore<T>, usize)> {
    from_bytes(&std::fs::read(path)?)
}
