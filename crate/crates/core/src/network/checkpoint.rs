//! Checkpoint directory format: `manifest.json` describing the model
//! configuration, step, and an ordered tensor table, next to `params.bin`
//! holding the raw little-endian f64 values concatenated in table order.
//! A save/load round trip is bitwise exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

use super::{Mode, ModelConfig};

pub const CHECKPOINT_SCHEMA: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const PARAMS_FILE: &str = "params.bin";

/// Training provenance carried in the manifest so evaluation reports can
/// name the context configuration and distillation weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub mode: String,
    pub past: usize,
    pub future: usize,
    pub beta: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into params.bin.
    offset: usize,
    /// Element count.
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    model_config: ModelConfig,
    step: u64,
    saved_unix_ms: u128,
    #[serde(default)]
    train_meta: Option<TrainMeta>,
    tensors: Vec<TensorEntry>,
}

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub step: u64,
    pub train_meta: Option<TrainMeta>,
}

pub fn save_checkpoint(
    store: &ParameterStore,
    config: &ModelConfig,
    step: u64,
    dir: &Path,
    train_meta: Option<TrainMeta>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::with_capacity(store.total_values() * 8);
    let mut offset = 0usize;
    for (name, tensor) in store.iter() {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset,
            length: tensor.numel(),
        });
        for v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += tensor.numel();
    }
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA,
        model_config: config.clone(),
        step,
        saved_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
        train_meta,
        tensors: entries,
    };
    fs::write(dir.join(PARAMS_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path).map_err(
        |e| Error::Checkpoint(format!("cannot read {}: {e}", manifest_path.display())),
    )?)?;
    if manifest.schema_version != CHECKPOINT_SCHEMA {
        return Err(Error::Checkpoint(format!(
            "schema version {} not supported (want {CHECKPOINT_SCHEMA})",
            manifest.schema_version
        )));
    }
    let blob = fs::read(dir.join(PARAMS_FILE))?;
    let total = blob.len() / 8;
    let mut store = ParameterStore::new();
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        if numel != entry.length {
            return Err(Error::Checkpoint(format!(
                "tensor {}: shape {:?} disagrees with stored length {}",
                entry.name, entry.shape, entry.length
            )));
        }
        if entry.offset + entry.length > total {
            return Err(Error::Checkpoint(format!(
                "tensor {}: extends past end of params.bin",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(entry.length);
        for i in 0..entry.length {
            let at = (entry.offset + i) * 8;
            let bytes: [u8; 8] = blob[at..at + 8].try_into().expect("8-byte window");
            data.push(f64::from_le_bytes(bytes));
        }
        store.insert(&entry.name, Tensor::new(entry.shape.clone(), data)?)?;
    }
    store.set_step(manifest.step);
    Ok(Checkpoint {
        config: manifest.model_config,
        store,
        step: manifest.step,
        train_meta: manifest.train_meta,
    })
}

impl TrainMeta {
    pub fn new(mode: impl Into<String>, past: usize, future: usize, beta: f64) -> Self {
        TrainMeta { mode: mode.into(), past, future, beta }
    }

    pub fn decode_mode(&self) -> Result<Mode> {
        match self.mode.as_str() {
            "streaming" | "dual" => Ok(Mode::Streaming),
            "nonstreaming" => Ok(Mode::Nonstreaming),
            other => Err(Error::Checkpoint(format!("unknown training mode {other}"))),
        }
    }
}
