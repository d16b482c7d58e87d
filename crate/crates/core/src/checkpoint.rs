//! Binary checkpoints.
//!
//! ```text
//! magic      8 bytes  "DOLFINCK"
//! version    u32 LE
//! header_len u64 LE
//! header     header_len bytes of JSON (CheckpointHeader)
//! payload    every parameter as f32 LE, declaration order, row-major
//! ```
//!
//! The header records the SHA-256 of the payload; loading verifies it.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocab;
use crate::error::{DolfinError, Result};
use crate::model::{Architecture, Classifier, ModelConfig};
use crate::tensor::Scalar;

pub const MAGIC: &[u8; 8] = b"DOLFINCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: Architecture,
    pub config: ModelConfig,
    pub dataset: String,
    /// Scalar type the model was trained in.
    pub precision: String,
    pub labels: Vec<String>,
    pub vocab: Vocab,
    pub vocab_hash: String,
    pub params: Vec<ParamEntry>,
    pub payload_sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub header: CheckpointHeader,
    pub model: Classifier<T>,
}

fn payload_of<T: Scalar>(model: &Classifier<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * model.params().num_scalars());
    for (_, t) in model.params().iter() {
        for &x in t.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

/// Serialises the model. Values are stored as `f32`.
pub fn to_bytes<T: Scalar>(model: &Classifier<T>, dataset: &str, labels: &[String], vocab: &Vocab) -> Result<Vec<u8>> {
    if vocab.len() != model.config().vocab_size {
        return Err(DolfinError::Mismatch(format!(
            "vocabulary of {} words for a model with {} rows",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let payload = payload_of(model);
    let header = CheckpointHeader {
        architecture: model.config().architecture,
        config: model.config().clone(),
        dataset: dataset.to_string(),
        precision: T::NAME.to_string(),
        labels: labels.to_vec(),
        vocab: vocab.clone(),
        vocab_hash: vocab.hash(),
        params: model
            .params()
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &Classifier<T>,
    dataset: &str,
    labels: &[String],
    vocab: &Vocab,
) -> Result<()> {
    let bytes = to_bytes(model, dataset, labels, vocab)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| DolfinError::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| DolfinError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| DolfinError::io(path, e))
}

fn corrupt(msg: impl Into<String>) -> DolfinError {
    DolfinError::Checkpoint(msg.into())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(corrupt(format!("truncated {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut rest = bytes;
    if take(&mut rest, 8, "magic")? != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(take(&mut rest, 8, "header length")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| corrupt("header length overflows"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(take(&mut rest, len, "header")?).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = rest;
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    if header.vocab.hash() != header.vocab_hash || header.vocab.len() != header.config.vocab_size {
        return Err(corrupt("vocabulary does not match its recorded hash or size"));
    }
    if header.architecture != header.config.architecture {
        return Err(corrupt("architecture field disagrees with config"));
    }

    let mut model =
        Classifier::<T>::new(header.config.clone(), None, 0).map_err(|e| corrupt(format!("config: {e}")))?;
    let ids: Vec<_> = model.params().ids().collect();
    if ids.len() != header.params.len() {
        return Err(corrupt(format!(
            "{} parameter blocks for an architecture with {}",
            header.params.len(),
            ids.len()
        )));
    }
    let mut data = payload;
    for (id, entry) in ids.into_iter().zip(&header.params) {
        let name = model.params().name(id).to_string();
        let tensor = model.params_mut().get_mut(id);
        if name != entry.name || tensor.shape() != entry.shape.as_slice() {
            return Err(corrupt(format!(
                "block '{}' {:?} where '{}' {:?} is expected",
                entry.name,
                entry.shape,
                name,
                tensor.shape()
            )));
        }
        let raw = take(&mut data, 4 * tensor.len(), "payload")?;
        for (x, chunk) in tensor.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *x = T::of(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
    }
    if !data.is_empty() {
        return Err(corrupt(format!("{} trailing payload bytes", data.len())));
    }
    Ok(Checkpoint { header, model })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| DolfinError::io(path, e))?;
    from_bytes(&bytes)
}

impl CheckpointHeader {
    /// Fails with [`DolfinError::Mismatch`] when the checkpoint was built
    /// for another dataset, architecture or vocabulary.
    pub fn check_compatible(
        &self,
        dataset: &str,
        architecture: Option<Architecture>,
        vocab: Option<&Vocab>,
    ) -> Result<()> {
        if self.dataset != dataset {
            return Err(DolfinError::Mismatch(format!(
                "checkpoint was trained on '{}', not '{dataset}'",
                self.dataset
            )));
        }
        if let Some(a) = architecture {
            if a != self.architecture {
                return Err(DolfinError::Mismatch(format!(
                    "checkpoint holds a {} model, not {a}",
                    self.architecture
                )));
            }
        }
        if let Some(v) = vocab {
            if v.hash() != self.vocab_hash {
                return Err(DolfinError::Mismatch(
                    "vocabulary differs from the one stored in the checkpoint".into(),
                ));
            }
        }
        Ok(())
    }
}
