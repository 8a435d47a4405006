//! `BCCK` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BCCK" | u32 version | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 rank | rank × u32 dims | f32 values
//! u32 metadata count
//! per entry:  u16 name length | UTF-8 name | u32 byte length | bytes
//! ```
//!
//! The model config lives in the `model_config` metadata entry as JSON.
//! Optimizer moments, when present, are stored as extra tensors named
//! `optim.first.<param>` / `optim.second.<param>`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::{Model, ModelConfig};
use crate::nn::{OptimizerState, Tensor};

pub const MAGIC: &[u8; 4] = b"BCCK";
pub const VERSION: u32 = 1;
pub const CONFIG_KEY: &str = "model_config";
const OPTIM_STEP_KEY: &str = "optimizer_step";
const FIRST_PREFIX: &str = "optim.first.";
const SECOND_PREFIX: &str = "optim.second.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub metadata: BTreeMap<String, String>,
    pub optimizer: Option<OptimizerState<f32>>,
}

fn put_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_name(buf, name);
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model, free-form metadata and optional optimizer state.
pub fn to_bytes(
    model: &Model<f32>,
    metadata: &BTreeMap<String, String>,
    optimizer: Option<&OptimizerState<f32>>,
) -> Vec<u8> {
    let params = model.tensors();
    let mut meta = metadata.clone();
    meta.insert(CONFIG_KEY.into(), serde_json::to_string(&model.config).expect("config serializes"));
    let optim = optimizer.filter(|s| !s.first.is_empty());
    if let Some(s) = optim {
        meta.insert(OPTIM_STEP_KEY.into(), s.step.to_string());
    }

    let count = params.len() + optim.map_or(0, |s| s.first.len() + s.second.len());
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in &params {
        put_tensor(&mut buf, name, t);
    }
    if let Some(s) = optim {
        for ((name, _), t) in params.iter().zip(&s.first) {
            put_tensor(&mut buf, &format!("{FIRST_PREFIX}{name}"), t);
        }
        for ((name, _), t) in params.iter().zip(&s.second) {
            put_tensor(&mut buf, &format!("{SECOND_PREFIX}{name}"), t);
        }
    }
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (k, v) in &meta {
        put_name(&mut buf, k);
        buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
        buf.extend_from_slice(v.as_bytes());
    }
    buf
}

pub fn save(
    path: &Path,
    model: &Model<f32>,
    metadata: &BTreeMap<String, String>,
    optimizer: Option<&OptimizerState<f32>>,
) -> Result<()> {
    let bytes = to_bytes(model, metadata, optimizer);
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::CorruptCheckpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| CheckpointError::CorruptCheckpoint("name is not UTF-8".into()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
    let corrupt = |m: String| CheckpointError::CorruptCheckpoint(m);
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: VERSION });
    }
    let count = r.u32()? as usize;
    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name = r.name()?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| corrupt("tensor too large".into()))?;
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| corrupt("tensor too large".into()))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::from_vec(&dims, data).map_err(|e| corrupt(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(corrupt(format!("duplicate tensor {name}")));
        }
    }
    let meta_count = r.u32()? as usize;
    let mut metadata = BTreeMap::new();
    for _ in 0..meta_count {
        let key = r.name()?;
        let len = r.u32()? as usize;
        let value = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt(format!("metadata {key} is not UTF-8")))?;
        metadata.insert(key, value);
    }
    if r.pos != buf.len() {
        return Err(corrupt(format!("{} trailing bytes", buf.len() - r.pos)));
    }

    let config_json = metadata.remove(CONFIG_KEY).ok_or_else(|| corrupt("missing model config".into()))?;
    let config: ModelConfig = serde_json::from_str(&config_json).map_err(|e| corrupt(format!("model config: {e}")))?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut model: Model<f32> = Model::init(&config, &mut rng).map_err(|e| corrupt(format!("model config: {e}")))?;
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let mut take = |name: &str, like: &Tensor<f32>| -> Result<Tensor<f32>> {
        let t = tensors.remove(name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if t.shape() != like.shape() {
            return Err(corrupt(format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), like.shape())));
        }
        Ok(t)
    };
    for (slot, name) in model.tensors_mut().into_iter().zip(&names) {
        *slot = take(name, slot)?;
    }
    let optimizer = match metadata.remove(OPTIM_STEP_KEY) {
        Some(step) => {
            let step = step.parse().map_err(|_| corrupt("bad optimizer step".into()))?;
            let params = model.tensors();
            let mut first = Vec::with_capacity(params.len());
            let mut second = Vec::with_capacity(params.len());
            for (name, t) in &params {
                first.push(take(&format!("{FIRST_PREFIX}{name}"), t)?);
            }
            for (name, t) in &params {
                second.push(take(&format!("{SECOND_PREFIX}{name}"), t)?);
            }
            Some(OptimizerState { step, first, second })
        }
        None => None,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { model, metadata, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_config;
    use crate::nn::{optimizer_step, OptimizerConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Model<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m: Model<f32> = Model::init(&toy_config(), &mut rng).unwrap();
        // Non-zero biases so the round trip covers every tensor.
        for t in m.tensors_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v += i as f32 * 1e-3;
            }
        }
        m
    }

    #[test]
    fn round_trip_bit_exact() {
        let m = model();
        let mut meta = BTreeMap::new();
        meta.insert("config_hash".to_string(), "abc".to_string());
        let ck = from_bytes(&to_bytes(&m, &meta, None)).unwrap();
        assert_eq!(ck.model.config, m.config);
        for ((n1, a), (n2, b)) in ck.model.tensors().iter().zip(m.tensors()) {
            assert_eq!(n1, &n2);
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(ck.metadata, meta);
        assert!(ck.optimizer.is_none());
    }

    #[test]
    fn optimizer_state_round_trip() {
        let mut m = model();
        let grads = m.clone();
        let mut state = OptimizerState::new();
        let g: Vec<&Tensor<f32>> = grads.tensors().into_iter().map(|(_, t)| t).collect();
        optimizer_step(&mut m.tensors_mut(), &g, &mut state, &OptimizerConfig::default()).unwrap();
        let ck = from_bytes(&to_bytes(&m, &BTreeMap::new(), Some(&state))).unwrap();
        assert_eq!(ck.optimizer.as_ref(), Some(&state));
        assert_eq!(ck.model, m);
    }

    #[test]
    fn truncated_is_corrupt() {
        let bytes = to_bytes(&model(), &BTreeMap::new(), None);
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(CheckpointError::CorruptCheckpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = to_bytes(&model(), &BTreeMap::new(), None);
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::VersionMismatch { found: 99, expected: 1 })));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = to_bytes(&model(), &BTreeMap::new(), None);
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::CorruptCheckpoint(_))));
    }
}
