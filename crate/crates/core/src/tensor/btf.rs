//! BTF v1: `"BTF1"`, u32 rank, rank × u32 extents, u8 dtype tag
//! (0 = f32, 1 = f64), then the row-major payload. Everything little-endian,
//! no padding.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{DType, Tensor};

pub const BTF_MAGIC: [u8; 4] = *b"BTF1";

pub fn write_btf<W: Write>(t: &Tensor, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(9 + 4 * t.rank() + t.len() * t.dtype().size_of());
    buf.extend_from_slice(&BTF_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(t.dtype().tag());
    match t.dtype() {
        DType::F32 => {
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    w.write_all(&buf)
}

pub fn read_btf<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::format("BTF", e.to_string()))?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != BTF_MAGIC {
        return Err(Error::format("BTF", "bad magic"));
    }
    let rank = cur.u32()? as usize;
    if rank == 0 {
        return Err(Error::format("BTF", "rank 0"));
    }
    let dims = (0..rank)
        .map(|_| cur.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let tag = cur.take(1)?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::format("BTF", format!("dtype tag {tag}")))?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("BTF", "extent overflow"))?;
    let payload = cur.take(n * dtype.size_of())?;
    if cur.pos != bytes.len() {
        return Err(Error::format("BTF", "trailing bytes"));
    }
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::with_dtype(dims, data, dtype).map_err(|e| Error::format("BTF", e.to_string()))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("BTF", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_btf(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_btf(t, &mut buf).expect("write to Vec");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_btf(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
