//! Self-describing checkpoint: a magic line, a JSON header listing every tensor as
//! (name, shape, dtype) with the architecture id, then raw little-endian f32 data in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::Network;
use super::params::{NetworkParams, Tensor};
use crate::error::{Result, WssError};

const MAGIC: &[u8] = b"WSSCKPT1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    architecture_id: String,
    input_mean: [f32; 3],
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

pub fn encode(params: &NetworkParams) -> Vec<u8> {
    let header = Header {
        architecture_id: params.architecture_id.clone(),
        input_mean: params.input_mean,
        tensors: params
            .tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(format!("{}\n", json.len()).as_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors.values() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<NetworkParams> {
    let bad = |m: &str| WssError::Checkpoint(m.to_string());
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("bad magic"))?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
    let len: usize = std::str::from_utf8(&rest[..nl])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad header length"))?;
    let rest = &rest[nl + 1..];
    if rest.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&rest[..len]).map_err(|e| WssError::Checkpoint(e.to_string()))?;
    let mut data = &rest[len..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        if e.dtype != "f32" {
            return Err(WssError::Checkpoint(format!("unsupported dtype `{}`", e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        if data.len() < n * 4 {
            return Err(bad("truncated tensor data"));
        }
        let values = data[..n * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        data = &data[n * 4..];
        tensors.insert(e.name, Tensor { shape: e.shape, data: values });
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let params = NetworkParams {
        architecture_id: header.architecture_id,
        tensors,
        input_mean: header.input_mean,
    };
    Network::new(&params)?;
    Ok(params)
}

pub fn save(params: &NetworkParams, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| WssError::io(path, e))
}

pub fn load(path: &Path) -> Result<NetworkParams> {
    decode(&fs::read(path).map_err(|e| WssError::io(path, e))?)
}
