//! Self-describing model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CJLM"                     magic
//! u32                        format version
//! u32 + bytes                JSON header: configs, vocabularies, provenance
//! u32                        tensor count
//! per tensor:
//!   u32 + bytes              name (UTF-8)
//!   u32                      rank
//!   u32 × rank               dims
//!   f32 × Π dims             row-major payload
//! u64                        FNV-1a checksum of every preceding byte
//! ```

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ExtractStats, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{EpochMetrics, TrainConfig};

pub const MAGIC: &[u8; 4] = b"CJLM";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub corpus_lines: usize,
    pub samples: usize,
    pub extract: ExtractStats,
    pub metrics: Vec<EpochMetrics>,
}

/// A trained model plus everything needed to use it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelArtifact {
    pub model: Model,
    pub train_config: TrainConfig,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    /// Whether sentence-end predictions were part of training.
    pub emit_eos: bool,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    emit_eos: bool,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    provenance: Provenance,
}

impl ModelArtifact {
    /// Packages a model, rounding its parameters to the on-disk `f32`
    /// precision so that the in-memory artifact and the saved file agree.
    pub fn new(
        mut model: Model,
        train_config: TrainConfig,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        emit_eos: bool,
        provenance: Provenance,
    ) -> Result<Self> {
        if model.src_vocab_size() != src_vocab.len() || model.tgt_vocab_size() != tgt_vocab.len() {
            return Err(Error::Shape("model and vocabulary sizes disagree".into()));
        }
        model.round_to_storage();
        Ok(ModelArtifact {
            model,
            train_config,
            src_vocab,
            tgt_vocab,
            emit_eos,
            provenance,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model.config.clone(),
            train: self.train_config.clone(),
            emit_eos: self.emit_eos,
            src_vocab: self.src_vocab.clone(),
            tgt_vocab: self.tgt_vocab.clone(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let tensors = self.model.tensors();

        let mut buf = Vec::with_capacity(json.len() + 4 * self.model.parameter_count() + 64);
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        put_u32(&mut buf, json.len() as u32);
        buf.extend_from_slice(&json);
        put_u32(&mut buf, tensors.len() as u32);
        for (name, t) in tensors {
            put_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut buf, d as u32);
            }
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let sum = fnv1a64(&buf);
        buf.extend_from_slice(&sum.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a CJLM model file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let body_len = bytes.len() - 8;
        let stored = u64::from_le_bytes(bytes[body_len..].try_into().expect("8 bytes"));
        let computed = fnv1a64(&bytes[..body_len]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader {
            bytes: &bytes[..body_len],
            pos: 8,
        };
        let json_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(json_len)?)?;
        let count = r.u32()? as usize;
        let mut loaded: HashMap<String, Tensor> = HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            loaded.insert(name, Tensor::from_vec(&dims, data));
        }
        if r.pos != r.bytes.len() {
            return Err(Error::Format("trailing bytes after tensors".into()));
        }

        let mut model = Model::init(
            header.model,
            header.src_vocab.len(),
            header.tgt_vocab.len(),
            0,
        )?;
        for (name, slot) in model.tensors_mut() {
            let t = loaded
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        Ok(ModelArtifact {
            model,
            train_config: header.train,
            src_vocab: header.src_vocab,
            tgt_vocab: header.tgt_vocab,
            emit_eos: header.emit_eos,
            provenance: header.provenance,
        })
    }
}

pub fn save_model(artifact: &ModelArtifact, path: &Path) -> Result<()> {
    let bytes = artifact.to_bytes()?;
    let mut file = File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelArtifact> {
    ModelArtifact::from_bytes(&fs::read(path)?)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated model file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocabulary;
    use crate::encoder::{Arch, Fusion};
    use crate::training::grad_check_config;

    fn artifact(arch: Arch, fusion: Fusion) -> ModelArtifact {
        let words: Vec<String> = (0..16).map(|i| format!("w{i}")).collect();
        let v = build_vocabulary([words], 100).unwrap();
        let model = Model::init(grad_check_config(arch, fusion), 20, 20, 3).unwrap();
        ModelArtifact::new(model, TrainConfig::default(), v.clone(), v, true, Provenance::default())
            .unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn bytes_round_trip() {
        for arch in Arch::ALL {
            for fusion in [Fusion::Gating, Fusion::Pooling] {
                let a = artifact(arch, fusion);
                let b = ModelArtifact::from_bytes(&a.to_bytes().unwrap()).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = artifact(Arch::Tag, Fusion::Gating).to_bytes().unwrap();
        let mut bad = bytes.clone();
        let i = bad.len() - 20;
        bad[i] ^= 0x40;
        assert!(matches!(ModelArtifact::from_bytes(&bad), Err(Error::Checksum { .. })));

        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&999u32.to_le_bytes());
        assert!(matches!(
            ModelArtifact::from_bytes(&bad),
            Err(Error::UnsupportedVersion(999))
        ));

        assert!(ModelArtifact::from_bytes(&bytes[..bytes.len() / 2]).is_err());
        assert!(ModelArtifact::from_bytes(b"NOPE0000000000000000").is_err());
    }
}
