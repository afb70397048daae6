use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelWeights, TransformerModel};
use crate::data::Vocabulary;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "fvlab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON container: config, vocabulary, named weights and their digest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub weights: ModelWeights,
    pub digest: String,
}

impl Checkpoint {
    pub fn from_model(model: &TransformerModel) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            vocab: model.vocab().clone(),
            weights: model.weights().clone(),
            digest: model.weights_digest(),
        }
    }

    pub fn into_model(self) -> Result<TransformerModel> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let actual = self.weights.digest();
        if actual != self.digest {
            return Err(Error::Data(format!(
                "checkpoint digest mismatch: stored {}, computed {actual}",
                self.digest
            )));
        }
        TransformerModel::new(self.config, self.vocab, self.weights)
    }
}

pub fn save_checkpoint(model: &TransformerModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_vec(&Checkpoint::from_model(model))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TransformerModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
    ckpt.into_model()
}
