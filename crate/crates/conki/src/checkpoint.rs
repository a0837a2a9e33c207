//! Binary checkpoint files.
//!
//! Layout: an 8-byte magic, format version, the config hash of the run that
//! produced the file, then ordered records of `{name, dtype, shape, payload}`
//! with all integers and floats little-endian. Records keep the parameter
//! store's registration order, and any name-prefix subset (for example
//! `adapter.`) can be saved and loaded on its own.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"CONKICKP";
const VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config_hash: String,
}

pub fn save_checkpoint(
    store: &ParamStore,
    config_hash: &str,
    path: &Path,
    filter: impl Fn(&str) -> bool,
) -> Result<()> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(config_hash.len() as u32).to_le_bytes());
    bytes.extend_from_slice(config_hash.as_bytes());
    let entries: Vec<_> = store.entries().iter().filter(|e| filter(&e.name)).collect();
    bytes.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        bytes.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(e.name.as_bytes());
        bytes.push(DTYPE_F64);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&(e.tensor.rows() as u32).to_le_bytes());
        bytes.extend_from_slice(&(e.tensor.cols() as u32).to_le_bytes());
        for v in e.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: invalid utf-8 name", self.path.display())))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let hash_len = r.u32()? as usize;
    let config_hash = r.utf8(hash_len)?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.utf8(name_len)?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!(
                "{}: record {name:?} has unsupported dtype {dtype}",
                path.display()
            )));
        }
        let ndim = r.u32()?;
        if ndim != 2 {
            return Err(Error::Checkpoint(format!(
                "{}: record {name:?} has {ndim} dims, expected 2",
                path.display()
            )));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let payload = r.take(rows * cols * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name.clone(), Tensor::from_vec(rows, cols, data)?));
    }
    Ok((CheckpointHeader { version, config_hash }, records))
}

/// Copy `records` into matching store parameters. Every record must name an
/// existing parameter of identical shape; with `required_prefix`, every store
/// parameter under that prefix must also be covered by a record.
pub fn apply_records(
    store: &mut ParamStore,
    records: &[(String, Tensor)],
    required_prefix: Option<&str>,
) -> Result<()> {
    for (name, tensor) in records {
        let id = store.find(name).ok_or_else(|| {
            Error::Checkpoint(format!("record {name:?} matches no model parameter"))
        })?;
        let current = store.get(id);
        if current.shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "record {name:?} has shape {:?}, model expects {:?}",
                tensor.shape(),
                current.shape()
            )));
        }
        *store.get_mut(id) = tensor.clone();
    }
    if let Some(prefix) = required_prefix {
        for entry in store.entries() {
            if entry.name.starts_with(prefix) && !records.iter().any(|(n, _)| n == &entry.name) {
                return Err(Error::Checkpoint(format!(
                    "parameter {:?} missing from checkpoint",
                    entry.name
                )));
            }
        }
    }
    Ok(())
}
