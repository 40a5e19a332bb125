//! Model checkpoints: a versioned JSON container with the config and every
//! parameter tensor. f64 values serialize through the shortest round-trip
//! decimal form, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::TransformerModel;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: TransformerModel,
}

pub fn save_checkpoint(model: &TransformerModel, path: &Path) -> Result<()> {
    let ckpt = Checkpoint { version: CHECKPOINT_VERSION, model: model.clone() };
    let json = serde_json::to_string(&ckpt)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TransformerModel> {
    let raw = fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&raw)?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    ckpt.model.config.validate()?;
    for (name, tensor) in ckpt.model.tensors_named() {
        if !tensor.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("checkpoint tensor {name} has non-finite values")));
        }
    }
    Ok(ckpt.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig};

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = TransformerModel::new(ModelConfig {
            n_layers: 2,
            d_model: 16,
            d_ff: 32,
            n_heads: 2,
            vocab_size: 20,
            max_seq: 10,
            activation: Activation::Gelu,
            seed: 42,
        })
        .unwrap();
        let dir = std::env::temp_dir().join("qedit_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ckpt.json");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(model.bit_eq(&loaded));

        // A second save of the loaded model produces identical bytes.
        let path2 = dir.join("ckpt2.json");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = std::env::temp_dir().join("qedit_io_test_ver");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        let model = TransformerModel::new(ModelConfig {
            n_layers: 1,
            d_model: 8,
            d_ff: 8,
            n_heads: 1,
            vocab_size: 4,
            max_seq: 4,
            activation: Activation::Relu,
            seed: 0,
        })
        .unwrap();
        let mut ckpt = serde_json::to_value(Checkpoint { version: 1, model }).unwrap();
        ckpt["version"] = serde_json::json!(99);
        std::fs::write(&path, serde_json::to_string(&ckpt).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Config(_))));
        std::fs::remove_dir_all(&dir).ok();
    }
}
