//! Little-endian f32 blob files and atomic writes.

use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

/// Write bytes via a temp file + rename so readers never see a torn file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn f32s_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn le_bytes_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn write_f32_blob(path: &Path, values: &[f32]) -> Result<()> {
    atomic_write(path, &f32s_to_le_bytes(values))
}

/// Read exactly `expected` f32 values; errors name expected vs actual bytes.
pub fn read_f32_blob(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(le_bytes_to_f32s(&bytes))
}
