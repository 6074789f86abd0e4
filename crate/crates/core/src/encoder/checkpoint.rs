use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::grammar::Vocabulary;
use crate::numerics::{read_tensors, write_tensors};
use crate::scalar::Scalar;

use super::{EncoderConfig, EncoderError, EncoderParams};

/// Metadata stored next to the tensor file: the shape of the model and the
/// vocabulary its ids refer to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub config: EncoderConfig,
    pub vocabulary: Vec<String>,
}

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_model<T: Scalar>(path: &Path, params: &EncoderParams<T>, vocab: &Vocabulary) -> Result<(), EncoderError> {
    write_tensors(path, &params.named())?;
    let sidecar = ModelSidecar {
        config: params.config.clone(),
        vocabulary: vocab.texts().to_vec(),
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| EncoderError::Checkpoint(e.to_string()))?;
    std::fs::write(sidecar_path(path), json).map_err(|e| EncoderError::Checkpoint(e.to_string()))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<(EncoderParams<T>, Vocabulary), EncoderError> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| EncoderError::Checkpoint(format!("{}: {e}", side.display())))?;
    let sidecar: ModelSidecar = serde_json::from_str(&text).map_err(|e| EncoderError::Checkpoint(format!("{}: {e}", side.display())))?;
    sidecar.config.validate()?;
    let vocab = Vocabulary::from_texts(sidecar.vocabulary.iter().cloned());
    if vocab.texts() != sidecar.vocabulary.as_slice() || vocab.len() != sidecar.config.vocab_size {
        return Err(EncoderError::Checkpoint("vocabulary does not match the model".into()));
    }
    let params = EncoderParams::from_named(&sidecar.config, read_tensors(path)?)?;
    Ok((params, vocab))
}
