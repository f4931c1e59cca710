//! Checkpoint directories: `meta.json` plus raw little-endian `f32` tensors
//! in `params.bin`, guarded by a SHA-256 checksum.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::params::{Parameters, TensorSpec};
use crate::error::{Error, Result};

pub const META_FILE: &str = "meta.json";
pub const PARAMS_FILE: &str = "params.bin";
const DTYPE: &str = "f32-le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub dtype: String,
    pub tensors: Vec<TensorSpec>,
    pub sha256: String,
}

pub fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint(
    dir: &Path,
    params: &Parameters<f32>,
    seed: u64,
    step: u64,
) -> Result<CheckpointMeta> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes: Vec<u8> = params
        .as_slice()
        .iter()
        .flat_map(|x| x.to_le_bytes())
        .collect();
    let meta = CheckpointMeta {
        config: params.config().clone(),
        seed,
        step,
        dtype: DTYPE.into(),
        tensors: params.layout().specs().to_vec(),
        sha256: hex_digest(&bytes),
    };
    let bin = dir.join(PARAMS_FILE);
    fs::write(&bin, &bytes).map_err(|e| Error::io(&bin, e))?;
    let meta_path = dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<(Parameters<f32>, CheckpointMeta)> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", meta_path.display())))?;
    if meta.dtype != DTYPE {
        return Err(Error::Checkpoint(format!(
            "unsupported dtype {:?}",
            meta.dtype
        )));
    }
    let expected = Parameters::<f32>::zeros(&meta.config)?;
    if expected.layout().specs() != meta.tensors.as_slice() {
        return Err(Error::Checkpoint(
            "tensor list does not match the recorded model config".into(),
        ));
    }
    let bin = dir.join(PARAMS_FILE);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if hex_digest(&bytes) != meta.sha256 {
        return Err(Error::Checkpoint(format!(
            "{} is corrupt: checksum mismatch",
            bin.display()
        )));
    }
    if bytes.len() != expected.len() * 4 {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, expected {}",
            bin.display(),
            bytes.len(),
            expected.len() * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((Parameters::from_vec(&meta.config, data)?, meta))
}

/// Loads a checkpoint and requires it to match `config`.
pub fn load_checkpoint_for(
    dir: &Path,
    config: &ModelConfig,
) -> Result<(Parameters<f32>, CheckpointMeta)> {
    let (p, meta) = load_checkpoint(dir)?;
    if &meta.config != config {
        return Err(Error::Checkpoint(format!(
            "{} was trained with a different model config",
            dir.display()
        )));
    }
    Ok((p, meta))
}
