//! Binary checkpoint format (all integers and floats little-endian):
//!
//! ```text
//! magic      b"STGN"
//! version    u32 = 1
//! step       u64   training steps taken
//! seed       u64   seed the run started from
//! adam_step  u64
//! lr, beta1, beta2, epsilon   f64 x 4
//! count      u32   number of records
//! record*    name_len u32, name (UTF-8), rank u32, dims u32 x rank, values f32 x prod(dims)
//! ```
//!
//! Records are written in a fixed order: trainable parameters, batch-norm
//! running statistics, then Adam first and second moments prefixed
//! `adam.m.` / `adam.v.`.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use super::StegNet;
use crate::tensor::{AdamConfig, AdamState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STGN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic bytes {0:02x?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("parameter {name}: checkpoint shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint has no record for {0}")]
    Missing(String),
    #[error("unexpected record {0}")]
    Unexpected(String),
    #[error("malformed record name")]
    BadName,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: StegNet<f32>,
    pub optimizer: AdamState<f32>,
    pub step: u64,
    pub seed: u64,
}

impl Checkpoint {
    /// Fresh model and zeroed optimizer state.
    pub fn init(seed: u64, config: AdamConfig) -> Self {
        let model = StegNet::new(seed);
        let optimizer = AdamState::new(config, model.parameters().iter().map(|(_, t)| t.shape()));
        Self {
            model,
            optimizer,
            step: 0,
            seed,
        }
    }

    fn records(&self) -> Vec<(String, &Tensor<f32>)> {
        let params = self.model.parameters();
        let mut out = params.clone();
        out.extend(self.model.buffers());
        for ((name, _), m) in params.iter().zip(&self.optimizer.m) {
            out.push((format!("adam.m.{name}"), m));
        }
        for ((name, _), v) in params.iter().zip(&self.optimizer.v) {
            out.push((format!("adam.v.{name}"), v));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.optimizer.step_count.to_le_bytes());
        let c = self.optimizer.config;
        for v in [c.learning_rate, c.beta1, c.beta2, c.epsilon] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let records = self.records();
        buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, t) in records {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "header")?.try_into().expect("4 bytes");
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32("header")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: version });
        }
        let step = r.u64("header")?;
        let seed = r.u64("header")?;
        let adam_step = r.u64("header")?;
        let config = AdamConfig {
            learning_rate: r.f64("header")?,
            beta1: r.f64("header")?,
            beta2: r.f64("header")?,
            epsilon: r.f64("header")?,
        };
        let count = r.u32("header")? as usize;
        let mut found: HashMap<String, Tensor<f32>> = HashMap::with_capacity(count);
        for i in 0..count {
            let context = format!("record {i}");
            let len = r.u32(&context)? as usize;
            let name = std::str::from_utf8(r.take(len, &context)?)
                .map_err(|_| CheckpointError::BadName)?
                .to_string();
            let rank = r.u32(&name)? as usize;
            let dims = (0..rank).map(|_| r.u32(&name).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = dims.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or(CheckpointError::BadName)?, &name)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(&dims, values).map_err(|_| CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: vec![],
                found: dims.clone(),
            })?;
            found.insert(name, tensor);
        }

        let mut ckpt = Checkpoint::init(seed, config);
        ckpt.step = step;
        ckpt.optimizer.step_count = adam_step;
        let names: Vec<String> = ckpt.records().into_iter().map(|(n, _)| n).collect();
        if found.len() > names.len() {
            let extra = found.keys().find(|k| !names.contains(k)).cloned().unwrap_or_default();
            return Err(CheckpointError::Unexpected(extra));
        }
        let mut names = names.into_iter();
        let mut fill = |slots: Vec<&mut Tensor<f32>>| -> Result<(), CheckpointError> {
            for slot in slots {
                let name = names.next().expect("one name per slot");
                let t = found.remove(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
                if t.shape() != slot.shape() {
                    return Err(CheckpointError::ShapeMismatch {
                        name,
                        expected: slot.shape().to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                *slot = t;
            }
            Ok(())
        };
        fill(ckpt.model.parameters_mut())?;
        fill(ckpt.model.buffers_mut())?;
        fill(ckpt.optimizer.m.iter_mut().collect())?;
        fill(ckpt.optimizer.v.iter_mut().collect())?;
        Ok(ckpt)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Truncated(context.to_string()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, context: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, context: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, context: &str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, context)?.try_into().expect("8 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
