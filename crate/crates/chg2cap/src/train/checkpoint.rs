//! Binary checkpoint persistence.
//!
//! Layout, little-endian throughout: magic `CGCK`, u32 version (1), a
//! u32-length-prefixed JSON blob carrying the config snapshot, vocabulary,
//! epoch, and best validation BLEU-4, then one record per parameter tensor:
//! u16 name length, name bytes, u8 rank, u32 dims, f64 payload. The f64
//! payloads round-trip bitwise.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CGCK";
const CHECKPOINT_VERSION: u32 = 1;

/// A trained model with everything needed to run it standalone.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub best_bleu4: f64,
    pub model: Model,
}

#[derive(Serialize, Deserialize)]
struct MetaBlob {
    config: TrainConfig,
    vocab: Vec<String>,
    epoch: usize,
    best_bleu4: f64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = MetaBlob {
            config: self.config.clone(),
            vocab: self.vocab.words().to_vec(),
            epoch: self.epoch,
            best_bleu4: self.best_bleu4,
        };
        let json = serde_json::to_vec(&meta)
            .map_err(|e| Error::Parse(format!("checkpoint meta serialization: {e}")))?;

        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        for (name, tensor) in self.model.named() {
            let name_bytes = name.as_bytes();
            bytes.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
            bytes.extend_from_slice(name_bytes);
            bytes.push(tensor.shape().len() as u8);
            for &dim in tensor.shape() {
                bytes.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &value in tensor.data() {
                bytes.extend_from_slice(&value.to_le_bytes());
            }
        }
        std::fs::write(path, bytes).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut reader = Reader {
            bytes: &bytes,
            offset: 0,
        };
        let magic = reader.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse(format!(
                "checkpoint: bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
            )));
        }
        let version = reader.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint: unsupported version {version}"
            )));
        }
        let json_len = reader.u32()? as usize;
        let json = reader.take(json_len)?;
        let meta: MetaBlob = serde_json::from_slice(json)
            .map_err(|e| Error::Parse(format!("checkpoint meta json: {e}")))?;
        meta.config.validate()?;
        let vocab = Vocabulary::from_word_list(meta.vocab);

        // Collect the stored tensors, then pour them into a freshly shaped
        // model so the config decides which parameters must exist.
        let mut stored: Vec<(String, Tensor)> = Vec::new();
        while !reader.done() {
            let name_len = reader.u16()? as usize;
            let name = String::from_utf8(reader.take(name_len)?.to_vec())
                .map_err(|e| Error::Parse(format!("checkpoint tensor name: {e}")))?;
            let rank = reader.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(reader.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(reader.f64()?);
            }
            stored.push((name, Tensor::new(shape, data)?));
        }

        let mut model = Model::init(&meta.config, vocab.len())?;
        let mut expected = model.named_mut();
        if expected.len() != stored.len() {
            return Err(Error::Parse(format!(
                "checkpoint: {} tensors stored, config expects {}",
                stored.len(),
                expected.len()
            )));
        }
        for ((want_name, slot), (got_name, tensor)) in expected.iter_mut().zip(stored) {
            if *want_name != got_name {
                return Err(Error::Parse(format!(
                    "checkpoint: tensor {got_name} where {want_name} was expected"
                )));
            }
            if slot.shape() != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint_load",
                    lhs: slot.shape().to_vec(),
                    rhs: tensor.shape().to_vec(),
                });
            }
            **slot = tensor;
        }
        Ok(Checkpoint {
            config: meta.config,
            vocab,
            epoch: meta.epoch,
            best_bleu4: meta.best_bleu4,
            model,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Parse(format!(
                "checkpoint: truncated at byte {} needing {n} more of {}",
                self.offset,
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn done(&self) -> bool {
        self.offset == self.bytes.len()
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
