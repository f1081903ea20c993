//! `.tns` files: magic `TNS1`, u32 LE rank, rank x u32 LE extents, then
//! row-major f32 LE values.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TNS_MAGIC: &[u8; 4] = b"TNS1";

pub fn encode_tns(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(TNS_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a `.tns` byte buffer. `origin` only labels errors.
pub fn decode_tns(bytes: &[u8], origin: &Path) -> Result<Tensor<f32>> {
    let mut cur = Cursor { bytes, pos: 0, origin };
    if cur.take(4)? != TNS_MAGIC {
        return Err(Error::format(origin, "bad magic, expected TNS1"));
    }
    let rank = cur.u32()? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        shape.push(cur.u32()? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(origin, "shape overflows"))?;
    if bytes.len() - cur.pos != numel * 4 {
        return Err(Error::format(
            origin,
            format!(
                "shape {:?} needs {} data bytes, file has {}",
                shape,
                numel * 4,
                bytes.len() - cur.pos
            ),
        ));
    }
    let data = cur.bytes[cur.pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn write_tns(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_tns(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tns(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tns(&bytes, path)
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub origin: &'a Path,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.origin, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
