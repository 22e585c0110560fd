//! JSON checkpoints holding the task, vocabulary, encoder shape, both heads
//! and every parameter tensor by name.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::StyleTask;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::hex;
use crate::model::StyleModel;
use crate::tokenize::Vocabulary;

const FORMAT: &str = "stylex-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    task: StyleTask,
    vocab: Vocabulary,
    encoder: EncoderConfig,
    alpha: f64,
    word_channel: bool,
    trained: bool,
    tensors: Vec<TensorRecord>,
}

pub fn to_bytes(model: &StyleModel) -> Result<Vec<u8>> {
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        task: model.task.clone(),
        vocab: model.vocab.clone(),
        encoder: model.config().clone(),
        alpha: model.alpha,
        word_channel: model.has_word_channel(),
        trained: model.is_trained(),
        tensors: model
            .params
            .iter()
            .map(|(name, t)| TensorRecord {
                name: name.to_string(),
                shape: [t.nrows(), t.ncols()],
                data: t.iter().copied().collect(),
            })
            .collect(),
    };
    Ok(serde_json::to_vec(&file)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<StyleModel> {
    let file: CheckpointFile = serde_json::from_slice(bytes)?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    let mut model = StyleModel::build(file.task, file.vocab, file.encoder, file.alpha, file.word_channel, 0)?;
    if file.tensors.len() != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model has {}",
            file.tensors.len(),
            model.params.len()
        )));
    }
    for t in file.tensors {
        let id = model
            .params
            .id_of(&t.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", t.name)))?;
        let target = model.params.get_mut(id);
        if target.dim() != (t.shape[0], t.shape[1]) {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                t.name,
                t.shape,
                target.dim()
            )));
        }
        *target = Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", t.name)))?;
    }
    if file.trained {
        model.mark_trained();
    }
    Ok(model)
}

/// Writes the checkpoint and returns the SHA-256 of its bytes.
pub fn save(model: &StyleModel, path: impl AsRef<Path>) -> Result<String> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, &bytes)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub fn load(path: impl AsRef<Path>) -> Result<StyleModel> {
    from_bytes(&std::fs::read(path)?)
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}
