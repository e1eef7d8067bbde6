//! Model checkpoints: a flat sequence of named tensors plus a JSON sidecar
//! (`<file>.json`) holding the model spec.
//!
//! Each entry, little-endian, repeated until end of file:
//!
//! ```text
//! name length  u32
//! name         UTF-8 bytes
//! rank         u32
//! dims         u32 x rank
//! values       f32 x product(dims)
//! ```
//!
//! Batch-norm running statistics are stored as `<layer>.running_mean` and
//! `<layer>.running_var` entries alongside the trainable parameters.

use std::fs;
use std::path::{Path, PathBuf};

use fusegrid_core::model::{Model, ModelSpec};
use fusegrid_core::tensor::Tensor;

use crate::error::{Error, Result};

pub fn encode(entries: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated entry at byte {}", self.at))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut c = Cursor { bytes, at: 0 };
    let mut out = Vec::new();
    while c.at < bytes.len() {
        let len = c.u32()?;
        let name = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| "entry name is not UTF-8")?;
        let rank = c.u32()?;
        let dims = (0..rank).map(|_| c.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let raw = c.take(n.checked_mul(4).ok_or("entry size overflows")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| format!("{name}: {e}"))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode(&model.named_tensors())).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(model.spec()).expect("model spec serializes");
    fs::write(&side, json + "\n").map_err(|e| Error::io(side, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let spec: ModelSpec = serde_json::from_str(&text).map_err(|source| Error::Json { path: side, source })?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = decode(&bytes).map_err(|r| Error::format(path, r))?;
    let mut model = Model::build(&spec, 0)?;
    model.load_named(&entries)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_layout() {
        let t = Tensor::new(vec![2], vec![1.5, -1.0]).unwrap();
        let buf = encode(&[("ab".to_string(), t.clone())]);
        assert_eq!(&buf[..4], &2u32.to_le_bytes());
        assert_eq!(&buf[4..6], b"ab");
        assert_eq!(&buf[6..10], &1u32.to_le_bytes());
        assert_eq!(&buf[10..14], &2u32.to_le_bytes());
        assert_eq!(&buf[14..18], &1.5f32.to_le_bytes());
        assert_eq!(buf.len(), 22);
        assert_eq!(decode(&buf).unwrap(), vec![("ab".to_string(), t)]);
        assert!(decode(&buf[..21]).is_err());
    }
}
