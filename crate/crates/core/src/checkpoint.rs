//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "C2DS"  u16 version  u32 tensor count
//! per tensor: u16 name length, name (UTF-8), u8 rank, u32 extent × rank,
//!             f32 × element count
//! u32 metadata length, metadata (UTF-8 JSON)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamSet;
use crate::decoder::{DecoderModel, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{TrainConfig, Vocabulary};

pub const MAGIC: &[u8; 4] = b"C2DS";
pub const VERSION: u16 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed checkpoint at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint does not describe a valid model: {0}")]
    Model(String),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Everything needed besides the tensors to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
}

/// Named tensors plus the raw metadata text.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCheckpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub metadata: String,
}

pub fn encode_raw(raw: &RawCheckpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(raw.tensors.len() as u32).to_le_bytes());
    for (name, t) in &raw.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(raw.metadata.len() as u32).to_le_bytes());
    out.extend_from_slice(raw.metadata.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(CheckpointError::Format { offset: self.pos, message: message.into() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos..).and_then(|rest| rest.get(..n)) {
            Some(s) => {
                self.pos += n;
                Ok(s)
            }
            None => self.fail(format!("needs {n} more bytes, {} left", self.bytes.len() - self.pos)),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses the container without interpreting the metadata. Sizes are
/// checked against the input length before anything is allocated.
pub fn decode_raw(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CheckpointError::Format { offset: 0, message: "bad magic".into() });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u32()? as usize;
    // every tensor needs at least 2 + 1 + 1 bytes of header
    if count > r.remaining() / 4 {
        return r.fail(format!("tensor count {count} exceeds the file size"));
    }
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = match std::str::from_utf8(r.take(len)?) {
            Ok(s) if !s.is_empty() => s.to_string(),
            _ => return r.fail("tensor name must be non-empty UTF-8"),
        };
        if tensors.iter().any(|(n, _)| *n == name) {
            return r.fail(format!("duplicate tensor {name}"));
        }
        let rank = r.u8()? as usize;
        if rank == 0 || rank > MAX_RANK {
            return r.fail(format!("rank {rank} is not in 1..={MAX_RANK}"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).filter(|&n| n > 0);
        let Some(numel) = numel.filter(|&n| n <= r.remaining() / 4) else {
            return r.fail(format!("shape {shape:?} is empty or larger than the remaining data"));
        };
        let data = r
            .take(numel * 4)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Format { offset: r.pos, message: e.to_string() })?;
        tensors.push((name, t));
    }
    let meta_len = r.u32()? as usize;
    let metadata = match std::str::from_utf8(r.take(meta_len)?) {
        Ok(s) => s.to_string(),
        Err(_) => return r.fail("metadata is not UTF-8"),
    };
    if r.remaining() != 0 {
        return r.fail(format!("{} trailing bytes", r.remaining()));
    }
    Ok(RawCheckpoint { tensors, metadata })
}

pub fn encode(model: &DecoderModel<f32>, seed: u64, train: Option<&TrainConfig>) -> Vec<u8> {
    let meta = CheckpointMeta {
        config: model.config().clone(),
        vocabulary: model.vocab().clone(),
        seed,
        train: train.cloned(),
    };
    encode_raw(&RawCheckpoint {
        tensors: model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        metadata: serde_json::to_string(&meta).expect("metadata serializes"),
    })
}

pub fn decode(bytes: &[u8]) -> Result<(DecoderModel<f32>, CheckpointMeta)> {
    let raw = decode_raw(bytes)?;
    let meta: CheckpointMeta =
        serde_json::from_str(&raw.metadata).map_err(|e| CheckpointError::Model(format!("metadata: {e}")))?;
    let mut params = ParamSet::new();
    for (name, t) in raw.tensors {
        params.insert(name, t);
    }
    let model = DecoderModel::from_params(meta.config.clone(), meta.vocabulary.clone(), params)
        .map_err(|e| CheckpointError::Model(e.to_string()))?;
    Ok((model, meta))
}

pub fn save(path: &Path, model: &DecoderModel<f32>, seed: u64, train: Option<&TrainConfig>) -> Result<()> {
    fs::write(path, encode(model, seed, train)).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
}

pub fn load(path: &Path) -> Result<(DecoderModel<f32>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{CellConfig, CellKind, Shape};
    use crate::decoder::Pooling;
    use proptest::prelude::*;

    fn model(kind: CellKind) -> DecoderModel<f32> {
        let vocab = Vocabulary::build(["a red circle", "a blue star"], 1).unwrap();
        let state = if kind.is_2d() { Shape::Map(2, 3, 3) } else { Shape::Vector(5) };
        let mut cell = CellConfig::new(kind, state);
        cell.embedding = if kind.is_2d() { Shape::Map(2, 4, 4) } else { Shape::Vector(5) };
        cell.embed_hidden = 3;
        cell.embed_kernel = 3;
        let config = ModelConfig { cell, vocab_size: vocab.len(), visual: (4, 3, 3), pooling: Pooling::Max };
        DecoderModel::new(config, vocab, 9).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for kind in CellKind::ALL {
            let m = model(kind);
            let bytes = encode(&m, 9, Some(&TrainConfig::default()));
            let (back, meta) = decode(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(meta.seed, 9);
            assert_eq!(meta.train, Some(TrainConfig::default()));
            assert_eq!(encode(&back, 9, Some(&TrainConfig::default())), bytes);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.c2ds");
        let m = model(CellKind::Rnn2d);
        save(&p, &m, 1, None).unwrap();
        assert_eq!(load(&p).unwrap().0, m);
        assert!(matches!(load(&dir.path().join("missing")), Err(CheckpointError::Io(_))));
    }

    #[test]
    fn special_values_survive() {
        let t = Tensor::new(&[4], vec![f32::NAN, -0.0, f32::INFINITY, f32::MIN_POSITIVE / 2.0]).unwrap();
        let raw = RawCheckpoint { tensors: vec![("x".into(), t.clone())], metadata: "{}".into() };
        let back = decode_raw(&encode_raw(&raw)).unwrap();
        let got: Vec<u32> = back.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn malformed_inputs() {
        let bytes = encode(&model(CellKind::Gru2d), 0, None);
        for cut in [0, 3, 5, 9, 20, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::Format { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(CheckpointError::Version(2))));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode(&trailing).is_err());
        // huge declared count and extents must not allocate
        let mut huge = b"C2DS\x01\x00\xff\xff\xff\xff".to_vec();
        huge.extend_from_slice(&[0; 8]);
        assert!(decode_raw(&huge).is_err());
        let mut big = b"C2DS\x01\x00\x01\x00\x00\x00\x01\x00x\x02".to_vec();
        big.extend_from_slice(&u32::MAX.to_le_bytes());
        big.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_raw(&big).is_err());
        // valid container whose tensors do not fit the config
        let raw = decode_raw(&bytes).unwrap();
        let mut fewer = raw.clone();
        fewer.tensors.pop();
        assert!(matches!(decode(&encode_raw(&fewer)), Err(CheckpointError::Model(_))));
    }

    proptest! {
        #[test]
        fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let _ = decode(&bytes);
            let mut prefixed = MAGIC.to_vec();
            prefixed.extend_from_slice(&VERSION.to_le_bytes());
            prefixed.extend_from_slice(&bytes);
            let _ = decode(&prefixed);
        }

        #[test]
        fn raw_roundtrip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 0..4), meta in ".{0,20}") {
            let tensors: Vec<(String, Tensor<f32>)> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("t{i}"), Tensor::from_fn(s, |j| j as f32 * 0.5 - i as f32)))
                .collect();
            let raw = RawCheckpoint { tensors, metadata: meta };
            prop_assert_eq!(decode_raw(&encode_raw(&raw)).unwrap(), raw);
        }
    }
}
