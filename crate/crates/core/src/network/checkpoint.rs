//! Checkpoint files.
//!
//! Layout: `HAGC`; a `u64` length and that many bytes of TOML holding the
//! model configuration and optional epoch; a `u64` entry count; then per
//! entry a kind byte (0 parameter, 1 buffer, 2 momentum), a `u64` name
//! length, the UTF-8 name and the tensor in `HAGT` form.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{read_exact, read_u64, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HAGC";

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_MOMENTUM: u8 = 2;

/// Optimizer state carried alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingState {
    /// Epochs completed.
    pub epoch: usize,
    pub momentum: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub training: Option<TrainingState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epoch: Option<usize>,
    model: ModelConfig,
}

fn write_entry<W: Write>(w: &mut W, kind: u8, name: &str, t: &Tensor) -> Result<()> {
    w.write_all(&[kind])?;
    w.write_all(&(name.len() as u64).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    t.write_to(w)
}

pub fn write_checkpoint<W: Write>(
    w: &mut W,
    model: &Model,
    training: Option<&TrainingState>,
) -> Result<()> {
    let header = Header {
        epoch: training.map(|t| t.epoch),
        model: model.config().clone(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(text.len() as u64).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    let momentum = training.map(|t| &t.momentum);
    let count =
        model.store.num_params() + model.store.buffers().count() + momentum.map_or(0, |m| m.len());
    w.write_all(&(count as u64).to_le_bytes())?;
    for (name, p) in model.store.params() {
        write_entry(w, KIND_PARAM, name, &p.value)?;
    }
    for (name, t) in model.store.buffers() {
        write_entry(w, KIND_BUFFER, name, t)?;
    }
    for (name, t) in momentum.into_iter().flatten() {
        write_entry(w, KIND_MOMENTUM, name, t)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let corrupt = |msg: String| Error::corrupt("checkpoint", msg);
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let len = read_u64(r)?;
    if len > 1 << 20 {
        return Err(corrupt(format!("implausible header length {len}")));
    }
    let mut text = vec![0u8; len as usize];
    read_exact(r, &mut text)?;
    let text = String::from_utf8(text).map_err(|_| corrupt("header is not UTF-8".into()))?;
    let header: Header =
        toml::from_str(&text).map_err(|e| corrupt(format!("header: {}", e.message())))?;
    let mut model = Model::new(header.model, 0)?;

    let count = read_u64(r)?;
    let mut seen = HashSet::new();
    let mut momentum = BTreeMap::new();
    for _ in 0..count {
        let mut kind = [0u8; 1];
        read_exact(r, &mut kind)?;
        let name_len = read_u64(r)?;
        if name_len > 4096 {
            return Err(corrupt(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len as usize];
        read_exact(r, &mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| corrupt("entry name is not UTF-8".into()))?;
        let t = Tensor::read_from(r)?;
        let slot = match kind[0] {
            KIND_PARAM => {
                &mut model
                    .store
                    .param_mut(&name)
                    .map_err(|_| corrupt(format!("unknown parameter `{name}`")))?
                    .value
            }
            KIND_BUFFER => model
                .store
                .buffer_mut(&name)
                .map_err(|_| corrupt(format!("unknown buffer `{name}`")))?,
            KIND_MOMENTUM => {
                let p = model
                    .store
                    .param(&name)
                    .map_err(|_| corrupt(format!("momentum for unknown parameter `{name}`")))?;
                if p.value.shape() != t.shape() {
                    return Err(corrupt(format!(
                        "momentum `{name}` has shape {:?}",
                        t.shape()
                    )));
                }
                momentum.insert(name, t);
                continue;
            }
            k => return Err(corrupt(format!("unknown entry kind {k}"))),
        };
        if slot.shape() != t.shape() {
            return Err(corrupt(format!(
                "`{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
        if !seen.insert(name.clone()) {
            return Err(corrupt(format!("duplicate entry `{name}`")));
        }
    }
    let expected = model.store.num_params() + model.store.buffers().count();
    if seen.len() != expected {
        return Err(corrupt(format!(
            "{} of {expected} tensors present",
            seen.len()
        )));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(corrupt("trailing bytes after the last entry".into()));
    }
    let training = header.epoch.map(|epoch| TrainingState { epoch, momentum });
    Ok(Checkpoint { model, training })
}

pub fn save_checkpoint(path: &Path, model: &Model, training: Option<&TrainingState>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_checkpoint(&mut w, model, training)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(fs::File::open(path)?))
}
