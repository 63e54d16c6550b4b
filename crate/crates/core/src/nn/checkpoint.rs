//! Named-tensor checkpoint blobs.
//!
//! Layout (little-endian): magic `OCTCKPT1`, tensor count `u32`, then per
//! tensor: name length `u32`, UTF-8 name, rank `u32`, dims as `u64`, values as
//! `f64`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::param::Module;

const MAGIC: &[u8; 8] = b"OCTCKPT1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorMap {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl TensorMap {
    pub fn from_module<M: Module + ?Sized>(model: &M) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit("", &mut |p| {
            tensors.insert(p.name, (p.shape, p.value.to_vec()));
        });
        TensorMap { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        self.tensors.insert(name.into(), (shape, values));
    }

    /// Copies every tensor the module expects; missing or mis-shaped entries are errors.
    pub fn load_into<M: Module + ?Sized>(&self, model: &mut M) -> Result<()> {
        let mut problem = None;
        model.visit_mut("", &mut |p| {
            if problem.is_some() {
                return;
            }
            match self.tensors.get(&p.name) {
                Some((shape, values)) if *shape == p.shape => p.value.copy_from_slice(values),
                Some((shape, _)) => {
                    problem = Some(format!(
                        "tensor '{}' has shape {shape:?}, model expects {:?}",
                        p.name, p.shape
                    ))
                }
                None => problem = Some(format!("tensor '{}' missing from checkpoint", p.name)),
            }
        });
        match problem {
            Some(msg) => Err(Error::Shape(msg)),
            None => Ok(()),
        }
    }

    /// Sub-map of tensors under `prefix.`, with the prefix stripped.
    pub fn subset(&self, prefix: &str) -> TensorMap {
        let lead = format!("{prefix}.");
        TensorMap {
            tensors: self
                .tensors
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&lead).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, (shape, values)) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let count = cur.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|e| e.to_string())?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let values = (0..n)
                .map(|_| cur.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            tensors.insert(name, (shape, values));
        }
        if cur.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(TensorMap { tensors })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err("unexpected end of data".into());
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_roundtrip() {
        let mut m = TensorMap::default();
        m.insert("a.weight", vec![2, 2], vec![1.0, -2.0, 3.5, f64::MIN_POSITIVE]);
        m.insert("b", vec![], vec![7.0]);
        let back = TensorMap::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert!(TensorMap::from_bytes(&m.to_bytes()[..10]).is_err());
    }
}

/// Sidecar path for a checkpoint blob: `<blob>.meta`.
pub fn sidecar_path(blob: &std::path::Path) -> std::path::PathBuf {
    let mut s = blob.as_os_str().to_owned();
    s.push(".meta");
    std::path::PathBuf::from(s)
}

/// Writes the tensor blob and its text sidecar; returns the blob's SHA-256.
pub fn write_checkpoint(
    path: &std::path::Path,
    tensors: &TensorMap,
    sidecar: &crate::config::KvConfig,
) -> Result<String> {
    let bytes = tensors.to_bytes();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let meta = sidecar_path(path);
    std::fs::write(&meta, sidecar.to_text()).map_err(|e| Error::io(&meta, e))?;
    Ok(crate::config::sha256_hex(&bytes))
}

/// Reads a blob and its sidecar; also returns the blob's SHA-256.
pub fn read_checkpoint(
    path: &std::path::Path,
) -> Result<(TensorMap, crate::config::KvConfig, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = TensorMap::from_bytes(&bytes).map_err(|m| Error::format(path, m))?;
    let sidecar = crate::config::KvConfig::load(&sidecar_path(path))?;
    Ok((tensors, sidecar, crate::config::sha256_hex(&bytes)))
}
