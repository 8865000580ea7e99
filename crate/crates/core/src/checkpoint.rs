//! Self-describing checkpoint container.
//!
//! Layout: an 8-byte magic, a little-endian u64 manifest length, a JSON
//! manifest, then the raw tensor data as contiguous little-endian f64 in
//! manifest order. The manifest carries the architecture (base width, gamma,
//! heads, prompt sizing) and the preset reuse schedules; parameter names
//! never encode a variant, so a checkpoint written under one depth loads
//! under any other.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchConfig, Model, VariantConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DYNCKPT\x01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Optimizer/trainer state stored alongside the weights when checkpointing
/// mid-training. Moment tensors mirror the parameter list one-to-one.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainerMeta {
    pub iteration: u64,
    pub seed: u64,
    pub adam_step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub arch: ArchConfig,
    /// Preset reuse schedules shipped with the weights.
    pub variants: BTreeMap<String, [usize; 4]>,
    pub tensors: Vec<TensorMeta>,
    /// Present when optimizer moments follow the parameters in the data
    /// section (first all `m`, then all `v`, in tensor order).
    pub trainer: Option<TrainerMeta>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<ArrayD<f64>>,
    pub opt_m: Option<Vec<ArrayD<f64>>>,
    pub opt_v: Option<Vec<ArrayD<f64>>>,
}

fn default_variants(c: usize) -> BTreeMap<String, [usize; 4]> {
    let mut m = BTreeMap::new();
    m.insert("L".to_string(), VariantConfig::dynet_l(c).reuse_freqs);
    m.insert("S".to_string(), VariantConfig::dynet_s(c).reuse_freqs);
    m
}

fn write_tensor(w: &mut impl Write, t: &ArrayD<f64>) -> Result<()> {
    for v in t.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor(r: &mut impl Read, shape: &[usize]) -> Result<ArrayD<f64>> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data)
        .map_err(|e| Error::Checkpoint(format!("tensor shape mismatch: {e}")))
}

/// Write model weights (and optionally optimizer moments) to `path`.
pub fn save(
    model: &Model,
    path: impl AsRef<Path>,
    trainer: Option<(&TrainerMeta, &[ArrayD<f64>], &[ArrayD<f64>])>,
) -> Result<()> {
    let tensors: Vec<TensorMeta> = model
        .store
        .iter()
        .map(|(name, v)| TensorMeta {
            name: name.to_string(),
            shape: v.shape().to_vec(),
        })
        .collect();
    let manifest = Manifest {
        format: 1,
        arch: model.arch.clone(),
        variants: default_variants(model.arch.base_channels),
        tensors,
        trainer: trainer.map(|(t, _, _)| t.clone()),
    };
    let json = serde_json::to_vec(&manifest)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, v) in model.store.iter() {
        write_tensor(&mut w, v)?;
    }
    if let Some((_, m, vmom)) = trainer {
        for t in m {
            write_tensor(&mut w, t)?;
        }
        for t in vmom {
            write_tensor(&mut w, t)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read the full container.
pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint",
            path.as_ref().display()
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for tm in &manifest.tensors {
        tensors.push(read_tensor(&mut r, &tm.shape)?);
    }
    let (opt_m, opt_v) = if manifest.trainer.is_some() {
        let mut m = Vec::with_capacity(manifest.tensors.len());
        for tm in &manifest.tensors {
            m.push(read_tensor(&mut r, &tm.shape)?);
        }
        let mut v = Vec::with_capacity(manifest.tensors.len());
        for tm in &manifest.tensors {
            v.push(read_tensor(&mut r, &tm.shape)?);
        }
        (Some(m), Some(v))
    } else {
        (None, None)
    };
    Ok(Checkpoint {
        manifest,
        tensors,
        opt_m,
        opt_v,
    })
}

/// Load a checkpoint under the requested variant. Every stored tensor must
/// match a model parameter and vice versa; any missing or unexpected key is
/// an error.
pub fn load_model(path: impl AsRef<Path>, variant: &VariantConfig) -> Result<Model> {
    let ckpt = read(path)?;
    let model = assemble(&ckpt, variant)?;
    Ok(model)
}

/// Build a model from an in-memory checkpoint.
pub fn assemble(ckpt: &Checkpoint, variant: &VariantConfig) -> Result<Model> {
    let mut model = Model::build(&ckpt.manifest.arch, variant.clone(), 0)?;
    let mut seen = vec![false; model.store.len()];
    for (tm, data) in ckpt.manifest.tensors.iter().zip(&ckpt.tensors) {
        let id = model.store.lookup(&tm.name).ok_or_else(|| {
            Error::Checkpoint(format!("unexpected parameter `{}` in checkpoint", tm.name))
        })?;
        model.store.set_by_name(&tm.name, data.clone())?;
        seen[id.index()] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        let name = model
            .store
            .iter()
            .nth(missing)
            .map(|(n, _)| n.to_string())
            .unwrap_or_default();
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing parameter `{name}`"
        )));
    }
    Ok(model)
}
