//! `.apx` checkpoints: `b"APX1"`, a `u64` header length, a JSON header, a `u64`
//! parameter count, then the parameters as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mlp::Approximator;
use crate::error::{Error, Result};

pub const CHECKPOINT_EXT: &str = "apx";
const MAGIC: &[u8; 4] = b"APX1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub layer_sizes: Vec<usize>,
    pub step: u64,
    /// Model-specific settings (normalization, binning, dimensions).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, net: &Approximator) -> Result<()> {
    if header.layer_sizes != net.layer_sizes() {
        return Err(Error::Config("checkpoint header does not describe the network".into()));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * net.n_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(net.n_params() as u64).to_le_bytes());
    for p in net.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Approximator)> {
    let bytes = fs::read(path)?;
    let truncated = |field| Error::Decode {
        field,
        reason: format!("checkpoint {} is truncated", path.display()),
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Decode {
            field: "magic",
            reason: format!("{} is not an apx checkpoint", path.display()),
        });
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let header_end = 12usize.checked_add(header_len).ok_or_else(|| truncated("header"))?;
    let header_bytes = bytes.get(12..header_end).ok_or_else(|| truncated("header"))?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
    let count_bytes = bytes.get(header_end..header_end + 8).ok_or_else(|| truncated("n_params"))?;
    let n = u64::from_le_bytes(count_bytes.try_into().unwrap()) as usize;
    let payload = bytes
        .get(header_end + 8..header_end + 8 + n * 8)
        .ok_or_else(|| truncated("params"))?;
    let params = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let net = Approximator::from_params(&header.layer_sizes, params)?;
    Ok((header, net))
}
