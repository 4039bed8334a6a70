//! Single-file tensor archives.
//!
//! Layout: the 8-byte magic `PERICKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a UTF-8 JSON header, then
//! every tensor as little-endian `f64` in header order. The header holds
//! free-form metadata plus `{name, shape, offset}` for each tensor. Both
//! training checkpoints and stock backbone weight files use this layout.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{build_model, ModelConfig, PeriModel};
use crate::error::{Error, Result};
use crate::nn::optim::{Optimizer, OptimizerSettings};
use crate::nn::Parameterized;
use crate::pasgen::PasConfig;
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PERICKPT";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Archive {
    pub meta: Value,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

pub fn write_archive<'a, T: Scalar>(
    path: &Path,
    meta: &Value,
    tensors: impl IntoIterator<Item = (String, &'a ArrayD<T>)>,
) -> Result<()> {
    let tensors: Vec<(String, &ArrayD<T>)> = tensors.into_iter().collect();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        meta: meta.clone(),
        tensors: entries,
    })?;
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(header.len() as u64).map_err(io)?;
    w.write_all(&header).map_err(io)?;
    for (_, t) in &tensors {
        for &v in t.iter() {
            w.write_f64::<LittleEndian>(v.as_f64()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let io = |e: std::io::Error| Error::Checkpoint(format!("{}: truncated or unreadable: {e}", path.display()));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a checkpoint archive", path.display())));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {version}, this build reads version {FORMAT_VERSION}",
            path.display()
        )));
    }
    let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(io)?;
    let header: Header = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: header declares version {}",
            path.display(),
            header.format_version
        )));
    }
    let mut tensors = BTreeMap::new();
    for entry in header.tensors {
        let count: usize = entry.shape.iter().product();
        let mut data = vec![0f64; count];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
        let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
        tensors.insert(entry.name, t);
    }
    Ok(Archive {
        meta: header.meta,
        tensors,
    })
}

/// Everything needed to rebuild and evaluate a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub pas: PasConfig,
    pub vocabulary: Vec<String>,
    /// Harness-level state (run config, config hash, training counters).
    #[serde(default)]
    pub run: Value,
    #[serde(default)]
    pub optimizer: Option<OptimizerSettings>,
    #[serde(default)]
    pub optimizer_step: u64,
}

const OPT_PREFIX: &str = "optimizer.";

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &PeriModel<T>,
    meta: &CheckpointMeta,
    optimizer: Option<&Optimizer<T>>,
) -> Result<()> {
    let mut meta = meta.clone();
    meta.format_version = FORMAT_VERSION;
    meta.model = model.config.clone();
    meta.optimizer = optimizer.map(|o| o.settings.clone());
    meta.optimizer_step = optimizer.map_or(0, |o| o.step);
    let params = model.named_params();
    let mut tensors: Vec<(String, &ArrayD<T>)> = params.iter().map(|(n, p)| (n.clone(), &p.value)).collect();
    if let Some(opt) = optimizer {
        tensors.extend(opt.state_tensors().into_iter().map(|(n, t)| (format!("{OPT_PREFIX}{n}"), t)));
    }
    write_archive(path, &serde_json::to_value(&meta)?, tensors)
}

pub struct LoadedCheckpoint<T> {
    pub model: PeriModel<T>,
    pub meta: CheckpointMeta,
    pub optimizer: Option<Optimizer<T>>,
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<LoadedCheckpoint<T>> {
    let archive = read_archive(path)?;
    let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone())
        .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: metadata version {}",
            path.display(),
            meta.format_version
        )));
    }
    // Weights are overwritten below, so skip any pretrained-file lookup.
    let mut model_cfg = meta.model.clone();
    model_cfg.pretrained = false;
    let mut model: PeriModel<T> = build_model(&model_cfg, 0)?;
    model.config = meta.model.clone();
    for (name, param) in model.named_params_mut() {
        let src = archive
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing tensor {name}", path.display())))?;
        if src.shape() != param.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: stored shape {:?}, model shape {:?}",
                src.shape(),
                param.value.shape()
            )));
        }
        param.value = src.mapv(T::lit);
    }
    let optimizer = meta.optimizer.clone().map(|settings| {
        let mut opt = Optimizer::new(settings);
        opt.step = meta.optimizer_step;
        for (name, t) in &archive.tensors {
            if let Some(rest) = name.strip_prefix(OPT_PREFIX) {
                opt.restore_tensor(rest, t.mapv(T::lit));
            }
        }
        opt
    });
    Ok(LoadedCheckpoint { model, meta, optimizer })
}

/// Writes the backbone of one stream under stock (unprefixed) names.
pub fn save_backbone_weights<T: Scalar>(path: &Path, stream: &mut super::ResNetStream<T>) -> Result<()> {
    let mut params = Vec::new();
    stream.collect_backbone_params_mut("", &mut params);
    let tensors: Vec<(String, &ArrayD<T>)> = params.iter().map(|(n, p)| (n.clone(), &p.value)).collect();
    write_archive(path, &serde_json::json!({"kind": "backbone"}), tensors)
}
