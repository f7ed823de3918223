//! Single-file parameter containers.
//!
//! Layout: `CKP1`, a u64 LE index length, a JSON index, then one block per
//! named matrix. Blocks follow the `EMB1` header layout with magic `EMB8` and
//! f64 LE payloads so parameters reload bit-exactly. The index records each
//! block's offset, shape and SHA-256.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"CKP1";
pub const BLOCK_MAGIC: &[u8; 4] = b"EMB8";
const BLOCK_HEADER: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
    len: usize,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    meta: serde_json::Value,
    blocks: Vec<BlockEntry>,
}

/// Named f64 matrices plus free-form JSON metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: serde_json::Value,
    blocks: Vec<(String, Array2<f64>)>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode_f64_block(m: &Array2<f64>) -> Result<Vec<u8>> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("refusing to write non-finite parameters".into()));
    }
    let (rows, cols) = m.dim();
    let rows32 = u32::try_from(rows).map_err(|_| Error::Format("too many rows".into()))?;
    let cols32 = u32::try_from(cols).map_err(|_| Error::Format("too many columns".into()))?;
    let mut out = Vec::with_capacity(BLOCK_HEADER + 8 * m.len());
    out.extend_from_slice(BLOCK_MAGIC);
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for x in m.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_f64_block(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < BLOCK_HEADER {
        return Err(Error::Corruption("truncated block header".into()));
    }
    if &bytes[..4] != BLOCK_MAGIC {
        return Err(Error::Format(format!("bad block magic {:?}", &bytes[..4])));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes[12..16] != [0u8; 4] {
        return Err(Error::Format("reserved header bytes are not zero".into()));
    }
    if bytes.len() != BLOCK_HEADER + 8 * rows * cols {
        return Err(Error::Corruption(format!("block of {rows}x{cols} has {} bytes", bytes.len())));
    }
    let data = bytes[BLOCK_HEADER..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

impl Container {
    pub fn new(meta: serde_json::Value) -> Self {
        Container { meta, blocks: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Array2<f64>) {
        self.blocks.push((name.into(), m));
    }

    pub fn push_vec(&mut self, name: impl Into<String>, v: &[f64]) {
        self.push(name, Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector"));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Lookup(format!("checkpoint has no block `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.blocks.len());
        for (name, m) in &self.blocks {
            let block = encode_f64_block(m)?;
            entries.push(BlockEntry {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
                offset: payload.len(),
                len: block.len(),
                sha256: hex(&Sha256::digest(&block)),
            });
            payload.extend_from_slice(&block);
        }
        let index = serde_json::to_vec(&Index { meta: self.meta.clone(), blocks: entries })?;
        let mut out = Vec::with_capacity(12 + index.len() + payload.len());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Corruption("checkpoint shorter than its header".into()));
        }
        if &bytes[..4] != CONTAINER_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {:?}", &bytes[..4])));
        }
        let index_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..).unwrap_or_default();
        if index_len > body.len() {
            return Err(Error::Corruption("checkpoint index runs past end of file".into()));
        }
        let index: Index = serde_json::from_slice(&body[..index_len])
            .map_err(|e| Error::Corruption(format!("checkpoint index: {e}")))?;
        let payload = &body[index_len..];
        let mut blocks = Vec::with_capacity(index.blocks.len());
        let mut expected_end = 0;
        for e in &index.blocks {
            let block = payload
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| Error::Corruption(format!("block `{}` runs past end of file", e.name)))?;
            if hex(&Sha256::digest(block)) != e.sha256 {
                return Err(Error::Corruption(format!("checksum mismatch in block `{}`", e.name)));
            }
            let m = decode_f64_block(block)?;
            if m.dim() != (e.rows, e.cols) {
                return Err(Error::Corruption(format!("block `{}` shape disagrees with index", e.name)));
            }
            expected_end = expected_end.max(e.offset + e.len);
            blocks.push((e.name.clone(), m));
        }
        if expected_end != payload.len() {
            return Err(Error::Corruption("trailing bytes after last block".into()));
        }
        Ok(Container { meta: index.meta, blocks })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
