//! Binary checkpoints: `STSC`, version, JSON header, f32 blocks, CRC32.
//!
//! Layout after the 4-byte magic: version u16, header length u32, header
//! JSON, parameter blocks (then optimizer moments when present) as
//! little-endian f32, and a trailing CRC32 over header and blocks.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use neuralkit::{Parameters, Tensor};

use crate::model::{Model, ModelConfig, ModelError};

const MAGIC: &[u8; 4] = b"STSC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint version {found} not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checkpoint checksum mismatch")]
    ChecksumFailure,
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Optimizer moments aligned with the model's parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub step: u64,
    pub first_moment: Vec<Tensor<f32>>,
    pub second_moment: Vec<Tensor<f32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub fold: Option<usize>,
    pub corpus_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub trainer_state: Option<TrainerState>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in floats from the start of the block area.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    params: Vec<BlockEntry>,
    trainer_step: Option<u64>,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let mut entries = Vec::with_capacity(params.len());
        let mut blocks: Vec<f32> = Vec::new();
        for (name, t) in &params {
            entries.push(BlockEntry { name: name.clone(), shape: t.shape().to_vec(), offset: blocks.len() });
            blocks.extend_from_slice(t.data());
        }
        if let Some(state) = &self.trainer_state {
            for t in state.first_moment.iter().chain(&state.second_moment) {
                blocks.extend_from_slice(t.data());
            }
        }
        let header = Header {
            config: self.model.config.clone(),
            meta: self.meta.clone(),
            params: entries,
            trainer_step: self.trainer_state.as_ref().map(|s| s.step),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");

        let mut out = Vec::with_capacity(14 + json.len() + blocks.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        let body_start = out.len();
        out.extend_from_slice(&json);
        for v in &blocks {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[body_start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::CorruptFile(m.to_string());
        if bytes.len() < 14 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing STSC magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let body = &bytes[10..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if header_len > body.len() {
            return Err(corrupt("header length exceeds file"));
        }
        if crc32fast::hash(body) != stored {
            return Err(CheckpointError::ChecksumFailure);
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(&format!("header: {e}")))?;
        let raw = &body[header_len..];
        if raw.len() % 4 != 0 {
            return Err(corrupt("parameter area is not a whole number of floats"));
        }
        let floats: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

        let mut model = Model::<f32>::new(header.config.clone(), 0)?;
        let mut used = 0;
        {
            let mut slots = model.params_mut();
            if slots.len() != header.params.len() {
                return Err(corrupt("parameter count does not match config"));
            }
            for ((name, slot), entry) in slots.iter_mut().zip(&header.params) {
                let n: usize = entry.shape.iter().product();
                if *name != entry.name || slot.shape() != entry.shape.as_slice() {
                    return Err(corrupt(&format!("parameter {} does not match config", entry.name)));
                }
                let block = floats.get(entry.offset..entry.offset + n).ok_or_else(|| corrupt("truncated parameters"))?;
                slot.data_mut().copy_from_slice(block);
                used = used.max(entry.offset + n);
            }
        }
        let trainer_state = match header.trainer_step {
            None => None,
            Some(step) => {
                let shapes: Vec<Vec<usize>> = header.params.iter().map(|e| e.shape.clone()).collect();
                let mut take = |shape: &[usize]| -> Result<Tensor<f32>, CheckpointError> {
                    let n: usize = shape.iter().product();
                    let block = floats.get(used..used + n).ok_or_else(|| corrupt("truncated optimizer state"))?;
                    used += n;
                    Ok(Tensor::from_vec(shape, block.to_vec()).expect("sized"))
                };
                let first_moment = shapes.iter().map(|s| take(s)).collect::<Result<Vec<_>, _>>()?;
                let second_moment = shapes.iter().map(|s| take(s)).collect::<Result<Vec<_>, _>>()?;
                Some(TrainerState { step, first_moment, second_moment })
            }
        };
        if used != floats.len() {
            return Err(corrupt("trailing data after parameters"));
        }
        Ok(Self { model, trainer_state, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict, EncoderType};
    use neuralkit::seeded_rng;
    use rand::Rng;

    fn sample() -> Checkpoint {
        let model = Model::<f32>::new(ModelConfig::new(EncoderType::CnnGru, 5, 15), 42).unwrap();
        let meta = CheckpointMeta { seed: 42, epoch: 7, fold: Some(1), corpus_fingerprint: "abc".into() };
        Checkpoint { model, trainer_state: None, meta }
    }

    #[test]
    fn round_trip_predicts_identically() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.stsc");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.config().tag(), "CNN_GRU-k5-n15");
        let mut rng = seeded_rng(1);
        let bag = Tensor::from_vec(&[15, 128, 16], (0..15 * 2048).map(|_| rng.gen::<f32>()).collect()).unwrap();
        assert_eq!(predict(&ck.model, &bag).unwrap().to_bits(), predict(&back.model, &bag).unwrap().to_bits());
    }

    #[test]
    fn optimizer_state_round_trips() {
        let mut ck = sample();
        let moments = |v: f32| ck.model.params().iter().map(|(_, t)| Tensor::full(t.shape(), v)).collect::<Vec<_>>();
        ck.trainer_state = Some(TrainerState { step: 12, first_moment: moments(0.5), second_moment: moments(0.25) });
        assert_eq!(Checkpoint::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }

    #[test]
    fn tampering_is_detected() {
        let mut bytes = sample().to_bytes();
        let i = bytes.len() - 100;
        bytes[i] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::ChecksumFailure)));
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::VersionMismatch { found: 9, .. })));
        assert!(matches!(Checkpoint::from_bytes(b"XXXX0000000000"), Err(CheckpointError::CorruptFile(_))));
        assert!(matches!(Checkpoint::from_bytes(b"ST"), Err(CheckpointError::CorruptFile(_))));
    }
}
