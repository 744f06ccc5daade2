//! Checkpoint directory: `manifest.json` plus one PTNSR file per parameter
//! under `params/`. Values are stored as f32.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{JcoModel, ModelConfig, ParamStore, TrainPolicy};
use crate::error::{Error, Result};
use crate::tensor::{read_ptnsr_file, write_ptnsr_file};

pub const CHECKPOINT_FORMAT: &str = "jco-checkpoint-v1";

/// Training state carried next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub policy: Option<TrainPolicy>,
    /// The last stage trained without person and garment tokens.
    pub unconditional: bool,
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: JcoModel,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    config: ModelConfig,
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

fn file_name(param: &str) -> String {
    format!("params/{param}.ptnsr")
}

pub fn save_checkpoint(dir: impl AsRef<Path>, model: &JcoModel, meta: &CheckpointMeta) -> Result<()> {
    let dir = dir.as_ref();
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut entries = Vec::with_capacity(model.params.len());
    for p in model.params.iter() {
        let file = file_name(&p.name);
        write_ptnsr_file(dir.join(&file), &p.value)?;
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            file,
            trainable: p.trainable,
        });
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        config: model.config.clone(),
        meta: meta.clone(),
        params: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    let path = dir.join("manifest.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format {
            format: "checkpoint",
            detail: format!("unknown format tag '{}'", manifest.format),
        });
    }
    let mut store = ParamStore::new();
    for e in &manifest.params {
        if store.id(&e.name).is_ok() {
            return Err(Error::Format {
                format: "checkpoint",
                detail: format!("parameter {} listed twice", e.name),
            });
        }
        let t = read_ptnsr_file(dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format {
                format: "checkpoint",
                detail: format!("{}: manifest shape {:?}, file shape {:?}", e.name, e.shape, t.shape()),
            });
        }
        let id = store.insert(e.name.clone(), t);
        store.by_id_mut(id).trainable = e.trainable;
    }
    let model = JcoModel::from_store(manifest.config, store)?;
    Ok(Checkpoint {
        model,
        meta: manifest.meta,
    })
}
