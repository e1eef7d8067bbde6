//! VOL1 volumes.
//!
//! ```text
//! "VOL1"          4 bytes
//! kind            u8 (0 = image, 1 = mask)
//! dims            u32 x3, (z, y, x)
//! spacing         f32 x3
//! voxels          f32 x (z*y*x), x fastest
//! ```
//!
//! All numbers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use fusegrid_core::preprocess::{Volume, VolumeKind};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VOL1";
const HEADER_LEN: usize = 4 + 1 + 12 + 12;

pub fn encode(volume: &Volume, out: &mut impl Write) -> std::io::Result<()> {
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(MAGIC);
    header.push(match volume.kind() {
        VolumeKind::Image => 0,
        VolumeKind::Mask => 1,
    });
    for d in volume.dims() {
        header.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in volume.spacing() {
        header.extend_from_slice(&s.to_le_bytes());
    }
    out.write_all(&header)?;
    let mut payload = Vec::with_capacity(volume.data().len() * 4);
    for v in volume.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&payload)
}

/// Parses a complete VOL1 byte buffer. Errors carry a human-readable reason.
pub fn decode(bytes: &[u8]) -> std::result::Result<Volume, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("{} bytes is shorter than the VOL1 header", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return Err("missing VOL1 magic".into());
    }
    let kind = match bytes[4] {
        0 => VolumeKind::Image,
        1 => VolumeKind::Mask,
        k => return Err(format!("unknown volume kind {k}")),
    };
    let word = |i: usize| <[u8; 4]>::try_from(&bytes[i..i + 4]).unwrap();
    let dims = [0, 1, 2].map(|a| u32::from_le_bytes(word(5 + 4 * a)) as usize);
    let spacing = [0, 1, 2].map(|a| f32::from_le_bytes(word(17 + 4 * a)));
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("dims overflow")?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n * 4 {
        return Err(format!(
            "dims {dims:?} need {} payload bytes, found {}",
            n * 4,
            payload.len()
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(dims, spacing, data, kind).map_err(|e| e.to_string())
}

pub fn write(path: &Path, volume: &Volume) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(volume, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Volume> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::format(path, reason))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let v = Volume::new([1, 1, 2], [0.5, 1.0, 2.0], vec![1.0, -2.0], VolumeKind::Image).unwrap();
        let mut buf = Vec::new();
        encode(&v, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"VOL1");
        assert_eq!(buf[4], 0);
        assert_eq!(&buf[5..9], &1u32.to_le_bytes());
        assert_eq!(&buf[13..17], &2u32.to_le_bytes());
        assert_eq!(&buf[17..21], &0.5f32.to_le_bytes());
        assert_eq!(&buf[29..33], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 29 + 8);
        assert_eq!(decode(&buf).unwrap(), v);
    }

    #[test]
    fn rejects_damage() {
        let v = Volume::new([2, 1, 1], [1.0; 3], vec![0.0, 1.0], VolumeKind::Mask).unwrap();
        let mut buf = Vec::new();
        encode(&v, &mut buf).unwrap();
        assert!(decode(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = buf.clone();
        bad[4] = 7;
        assert!(decode(&bad).is_err());
        // a mask voxel that is not 0/1
        let mut bad = buf;
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&0.5f32.to_le_bytes());
        assert!(decode(&bad).is_err());
    }
}
