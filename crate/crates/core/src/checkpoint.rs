//! Versioned binary checkpoints.
//!
//! ```text
//! "PIANN"            5 bytes magic
//! version            u16 little-endian
//! manifest length    u64 little-endian
//! manifest           UTF-8 JSON (training config, progress, tensor table)
//! data               raw little-endian f64 blocks
//! ```
//!
//! The tensor table lists `{name, shape, offset}` with `offset` in bytes from
//! the start of the data section. Parameters keep their registry names; the
//! optimizer moments are stored as `adam.m/<name>` and `adam.v/<name>`.
//! Identical states serialize to identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Piann;
use crate::tensor::Tensor;
use crate::trainer::{AdamState, TrainConfig, TrainState};

pub const MAGIC: &[u8; 5] = b"PIANN";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TrainConfig,
    pub epoch: usize,
    pub adam_step: u64,
    pub tensors: Vec<TensorEntry>,
}

const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let mut push = |name: String, t: &Tensor| {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: data.len() as u64,
        });
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in state.model.params.iter() {
        push(name.to_string(), t);
    }
    for ((name, _), m) in state.model.params.iter().zip(&state.adam.m) {
        push(format!("{M_PREFIX}{name}"), m);
    }
    for ((name, _), v) in state.model.params.iter().zip(&state.adam.v) {
        push(format!("{V_PREFIX}{name}"), v);
    }
    let manifest = Manifest {
        config: state.config.clone(),
        epoch: state.epoch,
        adam_step: state.adam.step,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 10 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(corrupt(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn from_bytes(mut bytes: &[u8]) -> Result<TrainState> {
    if take(&mut bytes, MAGIC.len(), "magic")? != MAGIC {
        return Err(corrupt("not a PIANN checkpoint (bad magic)"));
    }
    let version = u16::from_le_bytes(take(&mut bytes, 2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(corrupt(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8, "manifest length")?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| corrupt("manifest length overflows"))?;
    let manifest: Manifest = serde_json::from_slice(take(&mut bytes, len, "manifest")?)?;
    let data = bytes;

    let read = |entry: &TensorEntry| -> Result<Tensor> {
        let n: usize = entry.shape.iter().product();
        let start = usize::try_from(entry.offset).map_err(|_| corrupt("offset overflows"))?;
        let block = data
            .get(start..start + 8 * n)
            .ok_or_else(|| corrupt(format!("tensor `{}` lies outside the data section", entry.name)))?;
        let values = block
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Tensor::new(entry.shape.clone(), values)?)
    };
    let lookup = |name: &str| -> Result<Tensor> {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| corrupt(format!("tensor `{name}` missing")))?;
        read(entry)
    };

    let mut model = Piann::new(manifest.config.model.clone())?;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let mut adam = AdamState::new(&model.params, manifest.config.lr);
    adam.step = manifest.adam_step;
    for (i, name) in names.iter().enumerate() {
        model
            .params
            .set(name, lookup(name)?)
            .map_err(|e| corrupt(format!("parameter `{name}`: {e}")))?;
        adam.m[i] = lookup(&format!("{M_PREFIX}{name}"))?;
        adam.v[i] = lookup(&format!("{V_PREFIX}{name}"))?;
        if adam.m[i].shape() != model.params.value(model.params.id(name).expect("registered")).shape()
            || adam.v[i].shape() != adam.m[i].shape()
        {
            return Err(corrupt(format!("moment shapes of `{name}` do not match the parameter")));
        }
    }
    Ok(TrainState {
        config: manifest.config,
        model,
        adam,
        epoch: manifest.epoch,
    })
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    fs::write(path, to_bytes(state)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}
