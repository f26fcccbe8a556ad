//! Portable tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"LMCT" | version: u32 | rank: u32 | extents: u64 x rank | dtype: u32 | payload
//! ```
//!
//! The payload is the row-major element buffer. Writers always emit float64
//! (`dtype = 1`); readers also accept float32 (`dtype = 2`).

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"LMCT";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u32 = 1;
pub const DTYPE_F32: u32 = 2;

/// Decoded file contents, always widened to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Format(format!(
                "payload of {} values does not fill shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(RawTensor { shape, data })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        RawTensor {
            shape: t.shape().to_vec(),
            data: t.to_f64_vec(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::from_f64(&self.data, &self.shape)
    }
}

pub fn encode(shape: &[usize], data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * shape.len() + 8 * data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<RawTensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rank = r.u32("rank")? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(usize::try_from(r.u64("extent")?).map_err(|_| Error::Format("extent overflows usize".into()))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let dtype = r.u32("dtype")?;
    let data = match dtype {
        DTYPE_F64 => r
            .take(n.checked_mul(8).ok_or_else(|| Error::Format("payload too large".into()))?, "payload")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        DTYPE_F32 => r
            .take(n.checked_mul(4).ok_or_else(|| Error::Format("payload too large".into()))?, "payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    RawTensor::new(shape, data)
}

pub fn save(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    fs::write(path, encode(shape, data))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<RawTensor> {
    decode(&fs::read(path)?)
}

impl<T: Scalar> Tensor<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        save(path, self.shape(), &self.to_f64_vec())
    }

    pub fn load(path: &Path) -> Result<Tensor<T>> {
        load(path)?.to_tensor()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let b = encode(&[2, 3], &[0.0; 6]);
        assert_eq!(&b[0..4], b"LMCT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(b[20..28].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[28..32].try_into().unwrap()), DTYPE_F64);
        assert_eq!(b.len(), 32 + 48);
    }

    #[test]
    fn rejects_corruption() {
        let mut b = encode(&[1], &[1.0]);
        b[0] = b'X';
        assert!(decode(&b).is_err());
        let b = encode(&[4], &[1.0; 4]);
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut b = encode(&[1], &[1.0]);
        b.push(0);
        assert!(decode(&b).is_err());
    }

    #[test]
    fn reads_f32_payload() {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&2u64.to_le_bytes());
        b.extend_from_slice(&DTYPE_F32.to_le_bytes());
        b.extend_from_slice(&1.5f32.to_le_bytes());
        b.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(decode(&b).unwrap().data, vec![1.5, -2.0]);
    }

    proptest! {
        #[test]
        fn roundtrip(shape in proptest::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) as f64).sin()).collect();
            let back = decode(&encode(&shape, &data)).unwrap();
            prop_assert_eq!(back.shape, shape);
            prop_assert_eq!(back.data, data);
        }
    }
}
