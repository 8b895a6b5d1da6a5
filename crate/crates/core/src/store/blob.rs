//! Headerless little-endian f32 blobs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{LensError, Result};

/// Byte size of a blob holding `floats` values.
pub fn expected_bytes(floats: usize) -> u64 {
    floats as u64 * 4
}

pub fn read_f32(path: &Path, floats: usize) -> Result<Vec<f32>> {
    let meta = fs::metadata(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LensError::MissingBlob {
            path: path.to_path_buf(),
        },
        _ => LensError::io(path, e),
    })?;
    let expected = expected_bytes(floats);
    if meta.len() != expected {
        return Err(LensError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: meta.len(),
        });
    }
    let bytes = fs::read(path).map_err(|e| LensError::io(path, e))?;
    if bytes.len() as u64 != expected {
        return Err(LensError::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

pub fn write_f32(path: &Path, values: impl IntoIterator<Item = f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| LensError::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| LensError::io(path, e))?;
    let mut out = BufWriter::new(file);
    for v in values {
        out.write_all(&v.to_le_bytes())
            .map_err(|e| LensError::io(path, e))?;
    }
    out.flush().map_err(|e| LensError::io(path, e))
}
