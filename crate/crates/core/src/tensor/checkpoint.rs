//! Little-endian parameter file: `MUDT`, u32 version, then one record per
//! tensor: u32 name length, UTF-8 name, u32 rank, u64 extents, f64 payload.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MUDT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4) != Some(&CHECKPOINT_MAGIC[..]) {
        return Err("bad magic".into());
    }
    let version = r.u32().ok_or("truncated header")?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let mut out = Vec::new();
    while r.pos < buf.len() {
        let truncated = || format!("truncated record {}", out.len());
        let name_len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(name_len).ok_or_else(truncated)?)
            .map_err(|e| format!("record {}: {e}", out.len()))?
            .to_string();
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64().ok_or_else(truncated)? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(8).ok_or_else(truncated)?).ok_or_else(truncated)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    fs::write(path, encode_checkpoint(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf).map_err(|msg| Error::Format {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<(String, Tensor)> {
        vec![
            ("rgb.0.w".into(), Tensor::from_fn([2, 1, 3, 3], |i| i as f64 * 0.5 - 3.0)),
            ("scalar".into(), Tensor::scalar(f64::MIN_POSITIVE)),
            ("empty".into(), Tensor::zeros([0])),
        ]
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = encode_checkpoint(&[("a".into(), Tensor::new([1], vec![1.0]).unwrap())]);
        let mut want = b"MUDT".to_vec();
        want.extend([1, 0, 0, 0]);
        want.extend([1, 0, 0, 0, b'a']);
        want.extend([1, 0, 0, 0]);
        want.extend([1, 0, 0, 0, 0, 0, 0, 0]);
        want.extend(1.0f64.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip() {
        let t = sample();
        assert_eq!(decode_checkpoint(&encode_checkpoint(&t)).unwrap(), t);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = encode_checkpoint(&sample());
        bytes.push(0);
        assert!(decode_checkpoint(&bytes).is_err());
        let bytes = encode_checkpoint(&sample());
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }
}
