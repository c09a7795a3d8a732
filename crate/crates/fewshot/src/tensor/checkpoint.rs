//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//! magic `FSLT`, u32 version, u32 tensor count, then per tensor:
//! u32 name length, UTF-8 name, u32 rank, u64 per dimension, f64 payload.

use std::path::Path;

use super::{Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FSLT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    std::fs::write(path, encode_tensors(tensors)).map_err(|e| TensorError::Io(e.to_string()))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path).map_err(|e| TensorError::Io(e.to_string()))?;
    decode_tensors(&bytes)
}

pub(crate) fn encode_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &value in tensor.data() {
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
    out
}

pub(crate) fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Format(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Format(format!(
            "unsupported version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| TensorError::Format("tensor name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cur.f64()?);
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(tensors)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Format("unexpected end of file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
