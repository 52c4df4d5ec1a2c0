//! JSON Lines files with a leading metadata record.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{io_err, Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub(crate) trait Meta {
    fn schema_version(&self) -> u32;
    fn count(&self) -> usize;
}

pub(crate) fn write<M: Serialize, R: Serialize>(path: &Path, meta: &M, records: &[R]) -> Result<()> {
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, meta).map_err(|e| Error::Invalid(e.to_string()))?;
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Invalid(e.to_string()))?;
        out.push(b'\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&out).map_err(io_err(path))
}

pub(crate) fn read<M, R>(path: &Path) -> Result<(M, Vec<R>)>
where
    M: DeserializeOwned + Meta,
    R: DeserializeOwned,
{
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let lines: Vec<&str> = text.split_terminator('\n').collect();
    if lines.is_empty() {
        return Err(parse_err(1, "missing metadata record".into()));
    }
    if !text.ends_with('\n') {
        return Err(parse_err(lines.len(), "truncated record (no line terminator)".into()));
    }
    let meta: M = serde_json::from_str(lines[0]).map_err(|e| parse_err(1, e.to_string()))?;
    if meta.schema_version() != SCHEMA_VERSION {
        return Err(parse_err(
            1,
            format!("schema version {} (expected {})", meta.schema_version(), SCHEMA_VERSION),
        ));
    }
    let mut records = Vec::with_capacity(meta.count());
    for (i, line) in lines.iter().enumerate().skip(1) {
        records.push(serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?);
    }
    if records.len() != meta.count() {
        return Err(parse_err(
            lines.len() + usize::from(records.len() < meta.count()),
            format!("metadata declares {} records, file holds {}", meta.count(), records.len()),
        ));
    }
    Ok((meta, records))
}
