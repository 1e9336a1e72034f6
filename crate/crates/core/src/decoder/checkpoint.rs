//! Checkpoint directories: `manifest.json` (config plus parameter list) and
//! one AESC file per parameter under `params/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DecoderError, ModelConfig, ModelState};
use crate::tensor::{read_tensor, write_tensor, AescError, DType, ParamStore};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Manifest {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("parameter {name}: stored dims {stored:?} disagree with manifest {listed:?}")]
    ShapeDrift {
        name: String,
        listed: Vec<usize>,
        stored: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] AescError),
    #[error(transparent)]
    Model(#[from] DecoderError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub dims: Vec<usize>,
    pub dtype: DType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, state: &ModelState) -> Result<Manifest, CheckpointError> {
    let dir = dir.as_ref();
    let param_dir = dir.join("params");
    fs::create_dir_all(&param_dir).map_err(|source| CheckpointError::Io {
        path: param_dir.clone(),
        source,
    })?;
    let mut entries = Vec::with_capacity(state.params().len());
    for (_, name, t) in state.params().iter() {
        let file = format!("params/{name}.aesc");
        write_tensor(dir.join(&file), &t.detached())?;
        entries.push(ParamEntry {
            name: name.to_string(),
            file,
            dims: t.dims().to_vec(),
            dtype: t.dtype(),
        });
    }
    let manifest = Manifest {
        config: state.config().clone(),
        params: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|source| CheckpointError::Io { path, source })?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ModelState, CheckpointError> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|source| CheckpointError::Io {
        path: path.clone(),
        source,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|source| CheckpointError::Manifest { path, source })?;
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let t = read_tensor(dir.join(&entry.file))?;
        if t.dims() != entry.dims.as_slice() {
            return Err(CheckpointError::ShapeDrift {
                name: entry.name.clone(),
                listed: entry.dims.clone(),
                stored: t.dims().to_vec(),
            });
        }
        store.add(entry.name.clone(), t);
    }
    Ok(ModelState::from_params(manifest.config, store)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ModelConfig::desk();
        cfg.n_layers = 1;
        let state = ModelState::init(cfg, 42).unwrap();
        save_checkpoint(dir.path(), &state).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.config(), state.config());
        for ((_, n1, a), (_, n2, b)) in state.params().iter().zip(back.params().iter()) {
            assert_eq!(n1, n2);
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn missing_param_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ModelConfig::desk();
        cfg.n_layers = 1;
        let state = ModelState::init(cfg, 1).unwrap();
        save_checkpoint(dir.path(), &state).unwrap();
        fs::remove_file(dir.path().join("params/head.score.bias.aesc")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
