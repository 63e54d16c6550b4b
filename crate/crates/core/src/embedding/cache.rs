//! Volume feature cache.
//!
//! Layout (little-endian): magic `OCTFEAT1`, the 64 hex characters of the
//! backbone checkpoint's SHA-256, record count `u32`, then per volume:
//! id length `u32`, UTF-8 id, dimension `u32`, `d` values as `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::VolumeEmbedding;

const MAGIC: &[u8; 8] = b"OCTFEAT1";

pub fn write_feature_cache(
    path: &Path,
    checkpoint_hash: &str,
    embeddings: &[VolumeEmbedding],
) -> Result<()> {
    if checkpoint_hash.len() != 64 || !checkpoint_hash.is_ascii() {
        return Err(Error::invalid("checkpoint_hash", "expected 64 hex characters"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(checkpoint_hash.as_bytes());
    out.extend_from_slice(&(embeddings.len() as u32).to_le_bytes());
    for e in embeddings {
        out.extend_from_slice(&(e.volume_id.len() as u32).to_le_bytes());
        out.extend_from_slice(e.volume_id.as_bytes());
        out.extend_from_slice(&(e.vector.len() as u32).to_le_bytes());
        for &v in &e.vector {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Returns the checkpoint hash the cache was built from and its embeddings.
pub fn read_feature_cache(path: &Path) -> Result<(String, Vec<VolumeEmbedding>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|m| Error::format(path, m))
}

fn parse(bytes: &[u8]) -> std::result::Result<(String, Vec<VolumeEmbedding>), String> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = bytes.get(pos..pos + n).ok_or("unexpected end of data")?;
        pos += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err("bad magic".into());
    }
    let hash = String::from_utf8(take(64)?.to_vec()).map_err(|e| e.to_string())?;
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?);
        let volume_id = String::from_utf8(take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let d = u32_at(take(4)?);
        let vector = take(4 * d)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push(VolumeEmbedding { volume_id, vector });
    }
    if pos != bytes.len() {
        return Err("trailing bytes".into());
    }
    Ok((hash, out))
}
