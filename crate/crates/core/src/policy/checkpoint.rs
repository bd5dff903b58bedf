//! Checkpoint container.
//!
//! Layout: the 8-byte magic `RLMCQCK1`, a little-endian `u64` header length,
//! a JSON header with the model config and `(name, shape)` of every tensor,
//! then all tensor values as little-endian `f64` in header order.

use super::model::{PolicyConfig, PolicyParams};
use super::PolicyError;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"RLMCQCK1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: PolicyConfig,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn encode_checkpoint(params: &PolicyParams) -> Vec<u8> {
    let header = Header {
        config: params.config,
        tensors: params
            .names()
            .into_iter()
            .zip(&params.tensors)
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + params.num_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &params.tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<PolicyParams, PolicyError> {
    let bad = |m: &str| PolicyError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
    header.config.validate()?;
    let mut data = &bytes[16 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, shape) in &header.tensors {
        let n: usize = shape.iter().product();
        if data.len() < n * 8 {
            return Err(PolicyError::Checkpoint(format!("truncated tensor {name}")));
        }
        let vals: Vec<f64> = data[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[n * 8..];
        tensors.push(ArrayD::from_shape_vec(IxDyn(shape), vals).expect("shape/len agree"));
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensors"));
    }
    let params = PolicyParams {
        config: header.config,
        tensors,
    };
    params.check_shapes()?;
    Ok(params)
}

pub fn save_checkpoint(params: &PolicyParams, path: impl AsRef<Path>) -> Result<(), PolicyError> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)).map_err(|e| PolicyError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PolicyParams, PolicyError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| PolicyError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    decode_checkpoint(&bytes)
}
