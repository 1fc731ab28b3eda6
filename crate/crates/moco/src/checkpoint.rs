//! Binary checkpoints.
//!
//! Layout: the 8-byte magic, a little-endian `u64` header length, the JSON
//! header `{config, manifest}` and then every parameter as little-endian
//! `f64` values in manifest order. Manifest offsets are byte offsets from
//! the start of the blob section.

use std::path::Path;

use moco_core::model::{ModelConfig, PolicyParams};
use moco_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{MocoError, Result};
use crate::formats::write_file;

pub const MAGIC: &[u8; 8] = b"POCCOCK1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub manifest: Vec<ManifestEntry>,
}

pub fn encode(params: &PolicyParams) -> Vec<u8> {
    let mut offset = 0u64;
    let manifest = params
        .named()
        .map(|(name, t)| {
            let e = ManifestEntry { name: name.to_string(), shape: t.dims().to_vec(), offset };
            offset += 8 * t.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header { config: params.config().clone(), manifest }).expect("serializable");
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<PolicyParams> {
    let bad = |msg: String| MocoError::format(path, 0, msg);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let blob_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..blob_start]).map_err(|e| bad(format!("header: {e}")))?;
    let blob = &bytes[blob_start..];
    let mut named = Vec::with_capacity(header.manifest.len());
    let mut expected = 0u64;
    for e in header.manifest {
        if e.offset != expected {
            return Err(bad(format!("parameter {} at offset {}, expected {expected}", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > blob.len() {
            return Err(bad(format!("parameter {} runs past the end of the file", e.name)));
        }
        let data = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| bad(format!("parameter {}: {err}", e.name)))?;
        expected = end as u64;
        named.push((e.name, t));
    }
    if expected as usize != blob.len() {
        return Err(bad(format!("{} trailing bytes", blob.len() - expected as usize)));
    }
    PolicyParams::from_named(header.config, named).map_err(|e| bad(e.to_string()))
}

pub fn save(path: &Path, params: &PolicyParams) -> Result<()> {
    write_file(path, &encode(params))
}

pub fn load(path: &Path) -> Result<PolicyParams> {
    let bytes = std::fs::read(path).map_err(|e| MocoError::io(path, e))?;
    decode(path, &bytes)
}
