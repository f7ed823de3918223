//! `EMB1` embedding stores.
//!
//! `<prefix>.f32` holds a 16-byte header (`EMB1`, rows u32 LE, dim u32 LE,
//! four zero bytes) followed by rows*dim little-endian f32 values in
//! row-major order. `<prefix>.ids` lists one record id per line, row order.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub name: String,
    dim: usize,
    data: Vec<f32>,
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

fn data_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "f32")
}

fn ids_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "ids")
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Encode a rows x dim f32 matrix as an `EMB1` block.
pub fn encode_block(rows: usize, dim: usize, data: &[f32]) -> Result<Vec<u8>> {
    if data.len() != rows * dim {
        return Err(Error::shape(rows * dim, data.len()));
    }
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::Input(format!(
            "refusing to write non-finite value at row {}, col {}",
            i / dim.max(1),
            i % dim.max(1)
        )));
    }
    let rows32 = u32::try_from(rows).map_err(|_| Error::Format("too many rows".into()))?;
    let dim32 = u32::try_from(dim).map_err(|_| Error::Format("dim too large".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    out.extend_from_slice(EMB1_MAGIC);
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&dim32.to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for x in data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Decode an `EMB1` block, returning (rows, dim, data).
pub fn decode_block(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corruption(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[0..4] != EMB1_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes[12..16] != [0u8; 4] {
        return Err(Error::Format("reserved header bytes are not zero".into()));
    }
    let expected = HEADER_LEN + 4 * rows * dim;
    if bytes.len() != expected {
        return Err(Error::Corruption(format!(
            "header says {rows}x{dim} ({expected} bytes) but file has {} bytes",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((rows, dim, data))
}

impl EmbeddingStore {
    pub fn new(name: impl Into<String>, dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::shape(ids.len() * dim, data.len()));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate id `{id}`")));
            }
        }
        Ok(EmbeddingStore { name: name.into(), dim, data, ids, index })
    }

    /// Open `<prefix>.f32` and `<prefix>.ids`. The store is named after the
    /// prefix's file stem.
    pub fn open(prefix: impl AsRef<Path>) -> Result<Self> {
        let prefix = prefix.as_ref();
        let dpath = data_path(prefix);
        let bytes = std::fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
        let (rows, dim, data) = decode_block(&bytes)
            .map_err(|e| annotate(e, &dpath))?;
        let ipath = ids_path(prefix);
        let text = std::fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let ids: Vec<String> = text.lines().map(str::to_string).collect();
        if ids.len() != rows {
            return Err(Error::Corruption(format!(
                "{}: {} ids for {rows} rows",
                ipath.display(),
                ids.len()
            )));
        }
        let name = prefix
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(name, dim, ids, data).map_err(|e| annotate(e, &ipath))
    }

    pub fn write(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let prefix = prefix.as_ref();
        let bytes = encode_block(self.rows(), self.dim, &self.data)?;
        let dpath = data_path(prefix);
        std::fs::write(&dpath, bytes).map_err(|e| Error::io(&dpath, e))?;
        let ipath = ids_path(prefix);
        let mut f = std::io::BufWriter::new(std::fs::File::create(&ipath).map_err(|e| Error::io(&ipath, e))?);
        for id in &self.ids {
            writeln!(f, "{id}").map_err(|e| Error::io(&ipath, e))?;
        }
        f.flush().map_err(|e| Error::io(&ipath, e))
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, row: usize) -> Option<&[f32]> {
        (row < self.rows()).then(|| &self.data[row * self.dim..(row + 1) * self.dim])
    }

    pub fn lookup(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).and_then(|&r| self.row(r))
    }

    /// Row widened to f64.
    pub fn row_f64(&self, row: usize) -> Option<Vec<f64>> {
        self.row(row).map(|r| r.iter().map(|&x| f64::from(x)).collect())
    }
}

fn annotate(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corruption(m) => Error::Corruption(format!("{}: {m}", path.display())),
        other => other,
    }
}
