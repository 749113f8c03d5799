//! Binary checkpoint files.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "TCKP"
//! 4       4     format version, u32 little-endian
//! 8       4     header length H in bytes, u32 little-endian
//! 12      H     UTF-8 JSON header
//! 12+H    8*N   parameter values, f64 little-endian, in tensor-table order
//! ```
//!
//! The header carries the network config, run metadata and a tensor table
//! (name, shape, offset and length in values). Loading rebuilds the layout
//! from the config and rejects any table that disagrees with it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use toolcast_core::net::{ForecasterParams, NetConfig};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// False for instrument-only models.
    pub use_anatomy: bool,
    /// Completed training epochs.
    pub epochs: usize,
    pub seed: u64,
    /// Dataset the model was trained on.
    #[serde(default)]
    pub dataset: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    net: NetConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ForecasterParams,
}

fn table(params: &ForecasterParams) -> Vec<TensorRecord> {
    params
        .layout()
        .entries()
        .iter()
        .map(|e| TensorRecord {
            name: e.name.clone(),
            shape: e.shape.to_vec(),
            offset: e.range.start,
            len: e.range.len(),
        })
        .collect()
}

pub fn to_bytes(params: &ForecasterParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = Header {
        net: params.config().clone(),
        meta: meta.clone(),
        tensors: table(params),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Data(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + 8 * params.values().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: String| Error::Data(format!("checkpoint: {m}"));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing TCKP magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = word(8) as usize;
    let body = 12 + header_len;
    if bytes.len() < body {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..body]).map_err(|e| bad(format!("header: {e}")))?;
    header.net.validate()?;
    let data = &bytes[body..];
    if data.len() % 8 != 0 {
        return Err(bad(format!("data section of {} bytes is not a whole number of f64", data.len())));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let params = ForecasterParams::from_values(&header.net, values)?;
    if table(&params) != header.tensors {
        return Err(bad("tensor table does not match the network config".into()));
    }
    Ok(Checkpoint {
        meta: header.meta,
        params,
    })
}

pub fn save(path: &Path, params: &ForecasterParams, meta: &CheckpointMeta) -> Result<()> {
    fs::write(path, to_bytes(params, meta)?).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
