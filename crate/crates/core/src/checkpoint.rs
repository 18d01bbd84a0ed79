//! Versioned binary container for named tensors plus a JSON header.
//!
//! Layout (little endian): magic `FDCK`, format version `u32`, header length
//! `u32`, header JSON, tensor count `u32`, then per tensor: name length `u32`,
//! UTF-8 name, rank `u32`, dims as `u64`, values as `f64`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{FlowDetError, Result};
use crate::io::atomic_write;
use crate::model::{Detector, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub config_hash: String,
    /// Free-form run information (objective, step, metrics).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn encode_container<T: Scalar>(header: &CheckpointHeader, tensors: &[(String, &Tensor<T>)]) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(header).map_err(|e| FlowDetError::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    out.write_u32::<LittleEndian>(meta.len() as u32)?;
    out.extend_from_slice(&meta);
    out.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for (name, t) in tensors {
        out.write_u32::<LittleEndian>(name.len() as u32)?;
        out.extend_from_slice(name.as_bytes());
        out.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            out.write_u64::<LittleEndian>(d as u64)?;
        }
        for v in t.data() {
            out.write_f64::<LittleEndian>(v.to_f64_lossy())?;
        }
    }
    Ok(out)
}

fn corrupt(e: impl std::fmt::Display) -> FlowDetError {
    FlowDetError::Checkpoint(format!("truncated or corrupt: {e}"))
}

pub fn decode_container<T: Scalar>(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<(String, Tensor<T>)>)> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(corrupt)?;
    if &magic != MAGIC {
        return Err(FlowDetError::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(corrupt)?;
    if version != FORMAT_VERSION {
        return Err(FlowDetError::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let meta_len = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(corrupt)?;
    let header: CheckpointHeader = serde_json::from_slice(&meta).map_err(corrupt)?;
    let count = r.read_u32::<LittleEndian>().map_err(corrupt)?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name).map_err(corrupt)?;
        let name = String::from_utf8(name).map_err(corrupt)?;
        let rank = r.read_u32::<LittleEndian>().map_err(corrupt)? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(corrupt)?;
        let len: usize = shape.iter().product();
        if len > bytes.len() / 8 {
            return Err(corrupt(format!("tensor {name} claims {len} values")));
        }
        let data = (0..len)
            .map(|_| r.read_f64::<LittleEndian>().map(T::lit))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(corrupt)?;
        tensors.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok((header, tensors))
}

pub fn header_for(model: &ModelConfig, extra: serde_json::Value) -> CheckpointHeader {
    CheckpointHeader {
        format_version: FORMAT_VERSION,
        model: model.clone(),
        config_hash: model.config_hash(),
        extra,
    }
}

pub fn save_model<T: Scalar>(path: &Path, model: &Detector<T>, extra: serde_json::Value) -> Result<()> {
    let header = header_for(model.config(), extra);
    let tensors: Vec<(String, &Tensor<T>)> = model.params().iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    atomic_write(path, &encode_container(&header, &tensors)?)
}

/// Loads a model, rejecting files whose stored hash does not match their
/// architecture or (when given) the hash the caller expects.
pub fn load_model<T: Scalar>(path: &Path, expected_hash: Option<&str>) -> Result<(Detector<T>, CheckpointHeader)> {
    let bytes = fs::read(path)?;
    let (header, tensors) = decode_container::<T>(&bytes)?;
    let actual = header.model.config_hash();
    if header.config_hash != actual {
        return Err(FlowDetError::ConfigMismatch {
            expected: actual,
            found: header.config_hash,
        });
    }
    if let Some(e) = expected_hash {
        if e != header.config_hash {
            return Err(FlowDetError::ConfigMismatch {
                expected: e.to_string(),
                found: header.config_hash,
            });
        }
    }
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        store.insert(&name, t);
    }
    let model = Detector::from_params(header.model.clone(), store)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let det = Detector::<f32>::new(ModelConfig::tiny(), 4).unwrap();
        save_model(&p, &det, serde_json::json!({"note": 1})).unwrap();
        let (back, h) = load_model::<f32>(&p, Some(&ModelConfig::tiny().config_hash())).unwrap();
        assert_eq!(h.extra["note"], 1);
        for ((_, a, x), (_, b, y)) in det.params().iter().zip(back.params().iter()) {
            assert_eq!(a, b);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn rejects_mismatch_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let det = Detector::<f64>::new(ModelConfig::tiny(), 4).unwrap();
        save_model(&p, &det, serde_json::Value::Null).unwrap();
        assert!(matches!(
            load_model::<f64>(&p, Some("0000")),
            Err(FlowDetError::ConfigMismatch { .. })
        ));
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model::<f64>(&p, None), Err(FlowDetError::Checkpoint(_))));
        fs::write(&p, b"hello").unwrap();
        assert!(load_model::<f64>(&p, None).is_err());
    }
}
