use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, ModelState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub catalog_version: String,
    pub indices: Vec<usize>,
    pub medians: Vec<f64>,
    pub step: usize,
    pub param_count: usize,
    /// Hex SHA-256 of the tensor blob.
    pub blob_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub catalog_version: String,
    pub indices: Vec<usize>,
    pub medians: Vec<f64>,
    pub step: usize,
}

fn paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("model.bin"), dir.join("model.json"))
}

/// Writes `model.bin` (little-endian f64 parameters in layout order) and
/// `model.json` into `dir`.
pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<(), ModelError> {
    fs::create_dir_all(dir)?;
    let (bin, json) = paths(dir);
    let mut blob = Vec::with_capacity(ck.state.params.len() * 8);
    for p in &ck.state.params {
        blob.extend_from_slice(&p.to_le_bytes());
    }
    let manifest = CheckpointManifest {
        config: ck.state.config,
        catalog_version: ck.catalog_version.clone(),
        indices: ck.indices.clone(),
        medians: ck.medians.clone(),
        step: ck.step,
        param_count: ck.state.params.len(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
    };
    fs::write(&bin, &blob)?;
    fs::write(&json, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, ModelError> {
    let (bin, json) = paths(dir);
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&json)?)?;
    let blob = fs::read(&bin)?;
    if blob.len() != manifest.param_count * 8 {
        return Err(ModelError::Checkpoint(format!(
            "blob holds {} bytes, manifest expects {} parameters",
            blob.len(),
            manifest.param_count
        )));
    }
    if hex::encode(Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(ModelError::Checkpoint("tensor blob does not match its recorded hash".into()));
    }
    if manifest.indices.len() != manifest.config.attr_dim || manifest.medians.len() != manifest.config.attr_dim {
        return Err(ModelError::Checkpoint("selection or medians do not match attr_dim".into()));
    }
    let params = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Checkpoint {
        state: ModelState::from_params(manifest.config, params)?,
        catalog_version: manifest.catalog_version,
        indices: manifest.indices,
        medians: manifest.medians,
        step: manifest.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_tamper_detection() {
        let state = ModelState::new(ModelConfig::tiny(2), 9).unwrap();
        let ck = Checkpoint { state, catalog_version: "v".into(), indices: vec![4, 7], medians: vec![0.5, 1.0], step: 3 };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &ck).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap(), ck);
        let bin = dir.path().join("model.bin");
        let mut bytes = fs::read(&bin).unwrap();
        bytes[0] ^= 1;
        fs::write(&bin, bytes).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
