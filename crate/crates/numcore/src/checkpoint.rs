//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"LXCK"
//! version u32 (= 1)
//! count   u32
//! count x entry:
//!     name_len u32, name bytes (UTF-8)
//!     dtype    u8   (0 = float32, 1 = float64)
//!     rank     u32
//!     dims     u64 x rank
//!     data     numel x dtype size, row-major
//! ```

use std::path::Path;

use crate::error::{NumError, Result};
use crate::real::{DType, Real};
use crate::tensor::{numel_of, Tensor};

pub const MAGIC: &[u8; 4] = b"LXCK";
pub const VERSION: u32 = 1;

pub fn encode<F: Real>(entries: &[(String, Tensor<F>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NumError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode<F: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<F>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NumError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(NumError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| NumError::Checkpoint("entry name is not UTF-8".into()))?;
        let tag = r.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| NumError::Checkpoint(format!("unknown dtype tag {tag}")))?;
        if dtype != F::DTYPE {
            return Err(NumError::Checkpoint(format!(
                "entry `{name}` is {}, expected {}",
                dtype.name(),
                F::DTYPE.name()
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = numel_of(&shape);
        let raw = r.take(n * dtype.size())?;
        let data = raw.chunks_exact(dtype.size()).map(F::read_le).collect();
        entries.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(NumError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(entries)
}

pub fn save<F: Real>(path: impl AsRef<Path>, entries: &[(String, Tensor<F>)]) -> Result<()> {
    std::fs::write(path, encode(entries))?;
    Ok(())
}

pub fn load<F: Real>(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor<F>)>> {
    decode(&std::fs::read(path)?)
}
