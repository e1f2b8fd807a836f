//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DISTEMB\0" | u32 version | u64 header length | header (key = value text)
//! u64 tensor count | per tensor: u64 length, f64 values
//! ```
//!
//! The tensors are the model parameters in declaration order, followed by the
//! Adam first and second moments when the header says `has_adam = true`.
//! Shapes are not stored; they follow from the header.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::kv::{render, KvError, KvMap};
use crate::model::{Method, Model, ModelConfig, ModelError, NetworkConfig};
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainState};
use crate::wasserstein::{DistanceConfig, MetricError};

const MAGIC: &[u8; 8] = b"DISTEMB\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("not a checkpoint (bad magic bytes)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Serializes model, optional optimizer state and step.
pub fn encode(model: &Model, adam: Option<&AdamState>) -> Vec<u8> {
    let mut pairs = model.config_pairs();
    pairs.push(("step", adam.map_or(0, |a| a.step).to_string()));
    pairs.push(("has_adam", adam.is_some().to_string()));
    let header = render(&pairs);

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let mut tensors: Vec<&Tensor> = model.params().iter().collect();
    if let Some(a) = adam {
        tensors.extend(&a.m);
        tensors.extend(&a.v);
    }
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn parse_header(text: &str) -> Result<(ModelConfig, u64, bool), CheckpointError> {
    let mut kv = KvMap::parse(text)?;
    let method: Method = kv
        .require::<String>("method")?
        .parse()
        .map_err(|reason| KvError::InvalidValue { key: "method".into(), reason })?;
    let network = NetworkConfig::from_kv(&mut kv, 0)?;
    let m = kv.require("m")?;
    let p = kv.require("p")?;
    let n_classes = kv.require("n_classes")?;
    let step = kv.require("step")?;
    let has_adam = kv.require("has_adam")?;
    kv.finish()?;
    Ok((ModelConfig { network, method, m, distance: DistanceConfig::new(p)?, n_classes }, step, has_adam))
}

/// Returns the model and, if stored, the optimizer state.
pub fn decode(bytes: &[u8]) -> Result<(Model, Option<AdamState>), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u64()? as usize;
    let header = std::str::from_utf8(r.take(len)?).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let (config, step, has_adam) = parse_header(header)?;
    let template = Model::init(config.clone())?;
    let count = r.u64()? as usize;
    let per_copy = template.params().len();
    let expected = if has_adam { 3 * per_copy } else { per_copy };
    if count != expected {
        return Err(CheckpointError::Corrupt(format!("{} tensors, expected {}", count, expected)));
    }
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let shape = template.params()[i % per_copy].shape().to_vec();
        let n = r.u64()? as usize;
        if n != shape.iter().product::<usize>() {
            return Err(CheckpointError::Corrupt(format!("tensor {} has {} values for shape {:?}", i, n, shape)));
        }
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push(Tensor::new(shape, data).map_err(ModelError::from)?);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    let adam = if has_adam {
        let v = tensors.split_off(2 * per_copy);
        let m = tensors.split_off(per_copy);
        Some(AdamState { m, v, step })
    } else {
        None
    };
    Ok((Model::from_parts(config, tensors)?, adam))
}

pub fn save(path: &Path, state: &TrainState) -> Result<(), CheckpointError> {
    fs::write(path, encode(&state.model, Some(&state.adam))).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn load(path: &Path) -> Result<(Model, Option<AdamState>), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}
