//! Little-endian container for named arrays, shared by episode files and
//! checkpoints.
//!
//! Layout: 8 magic bytes, `u32` format version, `u32` array count, then one
//! table entry per array (`u16` name length, UTF-8 name, `u8` dtype, `u8`
//! rank, `u64` per dimension), then every payload in table order with no
//! padding. Decoding rejects trailing or missing bytes.

use crate::{Error, Result};

pub const BLOB_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    U8(Vec<u8>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    fn code(&self) -> u8 {
        match self {
            ArrayData::U8(_) => 0,
            ArrayData::F32(_) => 1,
            ArrayData::F64(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::U8(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            ArrayData::U8(_) => "u8",
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
        }
    }
}

fn elem_size(code: u8) -> Option<usize> {
    match code {
        0 => Some(1),
        1 => Some(4),
        2 => Some(8),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: &[usize], data: ArrayData) -> Self {
        let a = Self {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        };
        debug_assert_eq!(a.shape.iter().product::<usize>(), a.data.len(), "{}", a.name);
        a
    }
}

pub fn encode(magic: &[u8; 8], arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        let name = a.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(a.data.code());
        out.push(a.shape.len() as u8);
        for &d in &a.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for a in arrays {
        match &a.data {
            ArrayData::U8(v) => out.extend_from_slice(v),
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Data(format!("blob truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(magic: &[u8; 8], bytes: &[u8]) -> Result<Vec<NamedArray>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != magic {
        return Err(Error::Data("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != BLOB_VERSION {
        return Err(Error::Data(format!("unsupported blob version {version}")));
    }
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Data("array name is not UTF-8".into()))?
            .to_string();
        let code = r.u8()?;
        let size = elem_size(code).ok_or_else(|| Error::Data(format!("unknown dtype code {code} for {name}")))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(size))
            .ok_or_else(|| Error::Data(format!("array {name} is too large")))?;
        table.push((name, code, shape, n));
    }
    let mut arrays = Vec::with_capacity(table.len());
    for (name, code, shape, nbytes) in table {
        let raw = r.take(nbytes)?;
        let data = match code {
            0 => ArrayData::U8(raw.to_vec()),
            1 => ArrayData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => ArrayData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        arrays.push(NamedArray { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!("{} trailing bytes after payloads", bytes.len() - r.pos)));
    }
    Ok(arrays)
}

/// Writes `bytes` to `path` through a temporary sibling and a rename, so a
/// reader never observes a partial file.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MAGIC: &[u8; 8] = b"TESTBLOB";

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            a in proptest::collection::vec(any::<u8>(), 0..40),
            b in proptest::collection::vec(-1e6f32..1e6, 0..40),
            c in proptest::collection::vec(-1e6f64..1e6, 0..10),
        ) {
            let arrays = vec![
                NamedArray::new("a", &[a.len()], ArrayData::U8(a.clone())),
                NamedArray::new("bee", &[1, b.len()], ArrayData::F32(b.clone())),
                NamedArray::new("c", &[c.len(), 1], ArrayData::F64(c.clone())),
            ];
            let bytes = encode(MAGIC, &arrays);
            prop_assert_eq!(decode(MAGIC, &bytes).unwrap(), arrays);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let arrays = vec![NamedArray::new("x", &[3], ArrayData::F32(vec![1.0, 2.0, 3.0]))];
        let bytes = encode(MAGIC, &arrays);
        assert!(decode(MAGIC, &bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(MAGIC, &extra).is_err());
        assert!(decode(b"OTHERMAG", &bytes).is_err());
        let mut bad_dtype = bytes.clone();
        bad_dtype[8 + 4 + 4 + 2 + 1] = 9;
        assert!(decode(MAGIC, &bad_dtype).is_err());
    }
}
