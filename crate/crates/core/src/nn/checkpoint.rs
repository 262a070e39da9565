use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "mmdst-ckpt-v1";

/// JSON sidecar written next to the raw parameter blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointSidecar {
    pub version: String,
    pub model_config: ModelConfig,
    pub head_out: usize,
    pub vocab_hash: String,
    pub step: usize,
    pub metrics: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

/// Writes `checkpoint.json` and `params.bin` (little-endian f64, tensors
/// concatenated in declaration order) into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    params: &ModelParams,
    config: &ModelConfig,
    head_out: usize,
    vocab_hash: &str,
    step: usize,
    metrics: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let flats = params.flat();
    let mut blob = Vec::with_capacity(flats.iter().map(|(_, t)| t.len() * 8).sum());
    let mut tensors = Vec::with_capacity(flats.len());
    for (name, data) in &flats {
        tensors.push(TensorEntry {
            name: name.clone(),
            len: data.len(),
        });
        for v in *data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sidecar = CheckpointSidecar {
        version: CHECKPOINT_VERSION.to_string(),
        model_config: config.clone(),
        head_out,
        vocab_hash: vocab_hash.to_string(),
        step,
        metrics,
        tensors,
    };
    std::fs::write(
        dir.join("checkpoint.json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    std::fs::write(dir.join("params.bin"), blob)?;
    Ok(())
}

/// Loads a checkpoint directory, validating version and tensor layout.
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, CheckpointSidecar)> {
    let sidecar: CheckpointSidecar =
        serde_json::from_str(&std::fs::read_to_string(dir.join("checkpoint.json"))?)?;
    if sidecar.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {:?}",
            sidecar.version
        )));
    }
    let blob = std::fs::read(dir.join("params.bin"))?;
    let mut params = ModelParams::init(&sidecar.model_config, sidecar.head_out, 0)?;
    let mut offset = 0usize;
    let mut flats = params.flat_mut();
    if flats.len() != sidecar.tensors.len() {
        return Err(Error::Checkpoint("tensor count mismatch".into()));
    }
    for ((name, data), entry) in flats.iter_mut().zip(&sidecar.tensors) {
        if *name != entry.name || data.len() != entry.len {
            return Err(Error::Checkpoint(format!(
                "tensor layout mismatch at {name} (expected {} x {})",
                entry.name, entry.len
            )));
        }
        for v in data.iter_mut() {
            let bytes: [u8; 8] = blob
                .get(offset..offset + 8)
                .ok_or_else(|| Error::Checkpoint("parameter blob truncated".into()))?
                .try_into()
                .expect("slice of 8");
            *v = f64::from_le_bytes(bytes);
            offset += 8;
        }
    }
    if offset != blob.len() {
        return Err(Error::Checkpoint("trailing bytes in parameter blob".into()));
    }
    drop(flats);
    Ok((params, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_parameters() {
        let cfg = ModelConfig {
            d: 8,
            n_layers: 1,
            n_heads: 2,
            d_cnn: 8,
            vocab_size: 20,
            max_decode_len: 6,
            label_smoothing: 0.1,
            dropout: 0.1,
        };
        let params = ModelParams::init(&cfg, 20, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(
            dir.path(),
            &params,
            &cfg,
            20,
            "abc123",
            42,
            serde_json::json!({"val_loss": 1.5}),
        )
        .unwrap();
        let (loaded, sidecar) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(sidecar.step, 42);
        assert_eq!(sidecar.vocab_hash, "abc123");
        assert_eq!(sidecar.version, CHECKPOINT_VERSION);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let cfg = ModelConfig {
            d: 8,
            n_layers: 0,
            n_heads: 2,
            d_cnn: 8,
            vocab_size: 10,
            max_decode_len: 6,
            label_smoothing: 0.0,
            dropout: 0.0,
        };
        let params = ModelParams::init(&cfg, 10, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &params, &cfg, 10, "h", 0, serde_json::json!({})).unwrap();
        let sidecar_path = dir.path().join("checkpoint.json");
        let text = std::fs::read_to_string(&sidecar_path)
            .unwrap()
            .replace(CHECKPOINT_VERSION, "mmdst-ckpt-v0");
        std::fs::write(&sidecar_path, text).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
