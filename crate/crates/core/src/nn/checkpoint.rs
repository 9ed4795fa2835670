//! Binary tensor container.
//!
//! Layout (little-endian): magic `POSEFORGE\0CKPT\0\0`, `u32` version,
//! `u32` tensor count, then per tensor `u32` name length, name bytes, `u8`
//! dtype tag, `u32` rank, `u64` dims, raw values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 16] = b"POSEFORGE\0CKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    U8(Vec<u8>),
    U64(Vec<u64>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::U8(_) => 1,
            TensorData::U64(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f64(name: impl Into<String>, dims: &[usize], values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dims: dims.to_vec(),
            data: TensorData::F64(values),
        }
    }

    pub fn u64(name: impl Into<String>, values: Vec<u64>) -> Self {
        Self {
            name: name.into(),
            dims: vec![values.len()],
            data: TensorData::U64(values),
        }
    }

    pub fn bytes(name: impl Into<String>, values: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            dims: vec![values.len()],
            data: TensorData::U8(values),
        }
    }
}

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let count: usize = t.dims.iter().product();
        if count != t.data.len() {
            return Err(Error::format(Path::new(&t.name), format!("dims imply {count} values, found {}", t.data.len())));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.data.tag());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &t.data {
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::format(path, "bad magic string; not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let tag = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(path, format!("tensor {name}: dims overflow")))?;
        let data = match tag {
            0 => TensorData::F64(
                r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "size overflow"))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            1 => TensorData::U8(r.take(n)?.to_vec()),
            2 => TensorData::U64(
                r.take(n.checked_mul(8).ok_or_else(|| Error::format(path, "size overflow"))?)?
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            t => return Err(Error::format(path, format!("tensor {name}: unknown dtype tag {t}"))),
        };
        tensors.push(NamedTensor { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(tensors)
}

pub fn save(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode(tensors)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor::f64("a.weight", &[2, 3], vec![1.0, -2.5, f64::MIN_POSITIVE, 0.1, 1e300, -0.0]),
            NamedTensor::u64("step", vec![42]),
            NamedTensor::bytes("config", b"lr=0.0001\n".to_vec()),
        ]
    }

    #[test]
    fn round_trip_is_exact() {
        let t = sample();
        let bytes = encode(&t).unwrap();
        let back = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        match (&t[0].data, &back[0].data) {
            (TensorData::F64(a), TensorData::F64(b)) => {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
            }
            _ => panic!("dtype changed"),
        }
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] ^= 0xff;
        let err = decode(&bytes, Path::new("x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode(&sample()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3], Path::new("x")).is_err());
    }
}
