//! Binary checkpoints: an 8-byte little-endian header length, a JSON header,
//! then every parameter as little-endian `f64` in declaration order.

use std::fs;
use std::path::Path;

use gradtape::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub fingerprint: String,
    pub layout: Vec<(String, Vec<usize>)>,
    pub config: serde_json::Value,
    pub meta: serde_json::Value,
}

pub fn save(path: &Path, header: &Header, store: &ParamStore) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Invalid(e.to_string()))?;
    let flat = store.to_flat();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * flat.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn load(path: &Path) -> Result<(Header, Vec<f64>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |msg: &str| Error::Invalid(format!("{}: {msg}", path.display()));
    if bytes.len() < 8 {
        return Err(bad("file too short for a checkpoint"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + n).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let block = &bytes[8 + n..];
    if block.len() % 8 != 0 {
        return Err(bad("parameter block is not a whole number of f64 values"));
    }
    let expected: usize = header.layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if block.len() / 8 != expected {
        return Err(bad(&format!("parameter block holds {} values, layout expects {expected}", block.len() / 8)));
    }
    let flat = block
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, flat))
}

/// Loads `flat` into `store` after checking the layout matches.
pub(crate) fn restore(store: &mut ParamStore, header: &Header, flat: &[f64]) -> Result<()> {
    if store.layout() != header.layout {
        return Err(Error::Invalid(format!("checkpoint layout does not match a `{}` model", header.kind)));
    }
    store.load_flat(flat)?;
    Ok(())
}
