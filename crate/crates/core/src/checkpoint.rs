//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form, so save followed by load reproduces every parameter bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamState, Encoder, EncoderConfig, Mode};
use crate::predictor::Predictor;
use crate::pretrain::ContextModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub config_hash: String,
    /// Operation labels, indices as used by the encoder input.
    pub vocabulary: Vec<String>,
    pub encoder_config: EncoderConfig,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Pretrained {
        model: ContextModel,
        optimizer: AdamState,
    },
    Predictor {
        predictor: Predictor,
        encoder_optimizer: AdamState,
        head_optimizer: AdamState,
    },
}

impl Checkpoint {
    /// The encoder used for prediction and the mode it should run in.
    pub fn encoder(&self) -> (&Encoder, Mode) {
        match &self.payload {
            Payload::Pretrained { model, .. } => (&model.main, Mode::Eval),
            Payload::Predictor { predictor, .. } => (&predictor.encoder, predictor.mode.inference_mode()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {} is not supported (expected {FORMAT_VERSION})",
                path.display(),
                ckpt.version
            )));
        }
        let (enc, _) = ckpt.encoder();
        if enc.input_dim != ckpt.vocabulary.len() {
            return Err(Error::Checkpoint(format!(
                "{}: encoder expects {} op labels but the vocabulary has {}",
                path.display(),
                enc.input_dim,
                ckpt.vocabulary.len()
            )));
        }
        Ok(ckpt)
    }
}
