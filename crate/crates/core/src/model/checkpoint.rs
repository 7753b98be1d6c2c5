//! Checkpoint directory: `manifest.json` plus a little-endian `f64` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FusionMode, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numcore::{ParamGroup, ParamStore, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub vocab_hash: String,
    pub fusion_mode: Option<FusionMode>,
    /// Free-form label of the run that produced the weights.
    pub stage: String,
}

impl CheckpointMeta {
    pub fn new(model: &Model, stage: &str, seed: u64) -> Self {
        Self {
            seed,
            vocab_hash: model.config().lm.vocab.manifest().hash(),
            fusion_mode: model.config().fusion_mode(),
            stage: stage.to_string(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    group: ParamGroup,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    blob_sha256: String,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &Model, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(model.params.num_values() * 8);
    let mut tensors = Vec::new();
    for (_, p) in model.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f64".into(),
            offset: blob.len(),
            group: p.group,
            trainable: p.trainable,
        });
        for &x in p.value.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        config: model.config.clone(),
        meta: meta.clone(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
    };
    let blob_path = dir.join(PARAMS_FILE);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST_FILE);
    fs::write(&man_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&man_path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let man_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man_path).map_err(|e| Error::io(&man_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format {}", manifest.format)));
    }
    let blob_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(Error::Checkpoint("parameter blob does not match its manifest hash".into()));
    }
    let mut store = ParamStore::new();
    for t in manifest.tensors {
        if t.dtype != "f64" {
            return Err(Error::Checkpoint(format!("`{}` has unsupported dtype {}", t.name, t.dtype)));
        }
        if store.id(&t.name).is_some() {
            return Err(Error::Checkpoint(format!("`{}` appears twice", t.name)));
        }
        let n: usize = t.shape.iter().product();
        let bytes = blob
            .get(t.offset..t.offset + n * 8)
            .ok_or_else(|| Error::Checkpoint(format!("`{}` runs past the end of the blob", t.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let id = store.insert(t.name, Tensor::new(t.shape, data)?, t.group);
        store.get_mut(id).trainable = t.trainable;
    }
    let model = Model::from_parts(manifest.config, store)?;
    if model.config().lm.vocab.manifest().hash() != manifest.meta.vocab_hash {
        return Err(Error::Checkpoint("vocabulary hash does not match the stored configuration".into()));
    }
    Ok((model, manifest.meta))
}
