//! Checkpoint directory: `manifest.json` + `weights.f32` + `opt.f32`.
//!
//! The manifest carries names, shapes and byte offsets plus a full config
//! snapshot and the RNG bookkeeping (master seed + step counter), which is
//! everything needed to resume training bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet};
use crate::numerics::{Dtype, Tensor};

use super::optimizer::AdamState;
use super::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    /// Offset into weights.f32, in elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub version: u32,
    /// Training steps completed.
    pub step: u64,
    /// Optimizer step counter (bias correction).
    pub adam_step: u64,
    /// Master seed; together with `step` this is the full RNG state, since
    /// every step derives its stream from (master_seed, step).
    pub master_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Seeds of the training clips (evaluation rejects overlapping test
    /// sets).
    pub train_seeds: Vec<u64>,
    pub n_intermediate: usize,
    pub trainable: Vec<bool>,
    pub params: Vec<ParamEntry>,
}

/// Full training state as written to disk.
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamSet<f32>,
    pub opt: AdamState,
}

fn write_f32(path: &Path, chunks: &[&[f32]]) -> Result<()> {
    let mut bytes = Vec::new();
    for chunk in chunks {
        for v in *chunk {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::data(format!(
            "{}: length {} not divisible by 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    dir: &Path,
    params: &ParamSet<f32>,
    opt: &AdamState,
    model: &ModelConfig,
    train: &TrainConfig,
    step: u64,
    master_seed: u64,
    train_seeds: &[u64],
    n_intermediate: usize,
    trainable: &[bool],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0usize;
    let mut weight_chunks = Vec::with_capacity(params.len());
    for (name, tensor) in params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            dtype: Dtype::F32,
            offset,
            len: tensor.numel(),
        });
        offset += tensor.numel();
        weight_chunks.push(tensor.data());
    }
    write_f32(&dir.join("weights.f32"), &weight_chunks)?;

    let mut opt_chunks = Vec::with_capacity(2 * params.len());
    for m in &opt.m {
        opt_chunks.push(m.data());
    }
    for v in &opt.v {
        opt_chunks.push(v.data());
    }
    write_f32(&dir.join("opt.f32"), &opt_chunks)?;

    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        step,
        adam_step: opt.step,
        master_seed,
        model: model.clone(),
        train: train.clone(),
        train_seeds: train_seeds.to_vec(),
        n_intermediate,
        trainable: trainable.to_vec(),
        params: entries,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let weights = read_f32(&dir.join("weights.f32"))?;
    let total: usize = manifest.params.iter().map(|e| e.len).sum();
    if weights.len() != total {
        return Err(Error::data(format!(
            "weights.f32 holds {} values, manifest implies {total}",
            weights.len()
        )));
    }
    let mut params = ParamSet::new();
    for entry in &manifest.params {
        let numel: usize = entry.shape.iter().product();
        if numel != entry.len {
            return Err(Error::data(format!(
                "{}: shape {:?} does not match len {}",
                entry.name, entry.shape, entry.len
            )));
        }
        let data = weights[entry.offset..entry.offset + entry.len].to_vec();
        params.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }

    let opt_data = read_f32(&dir.join("opt.f32"))?;
    if opt_data.len() != 2 * total {
        return Err(Error::data(format!(
            "opt.f32 holds {} values, expected {}",
            opt_data.len(),
            2 * total
        )));
    }
    let mut m = Vec::with_capacity(manifest.params.len());
    let mut v = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        m.push(Tensor::new(
            entry.shape.clone(),
            opt_data[entry.offset..entry.offset + entry.len].to_vec(),
        )?);
    }
    for entry in &manifest.params {
        v.push(Tensor::new(
            entry.shape.clone(),
            opt_data[total + entry.offset..total + entry.offset + entry.len].to_vec(),
        )?);
    }
    Ok(Checkpoint {
        params,
        opt: AdamState {
            m,
            v,
            step: manifest.adam_step,
        },
        manifest,
    })
}

/// SHA-256 over the named parameters' little-endian bytes, in set order.
pub fn digest_params(params: &ParamSet<f32>, pred: impl Fn(&str) -> bool) -> String {
    let mut hasher = Sha256::new();
    for (name, tensor) in params.iter() {
        if !pred(name) {
            continue;
        }
        hasher.update(name.as_bytes());
        for v in tensor.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    let out = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in out {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}
