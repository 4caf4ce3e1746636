//! Versioned binary checkpoint.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "MARTCKPT"
//! version  u32
//! prec     u8       bytes per value (4 or 8)
//! metalen  u32      followed by metalen bytes of UTF-8 metadata text
//! count    u32      number of tensors, then per tensor:
//!   namelen u32, name bytes, ndim u32, ndim × u64 dims, values
//! ```

use std::path::Path;

use super::{Precision, Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MARTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors plus free-form metadata text.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(T::PRECISION.bytes() as u8);
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let prec = r.take(1)?[0] as usize;
        if prec != T::PRECISION.bytes() {
            let found = if prec == 4 { Precision::F32 } else { Precision::F64 };
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {found:?} values, expected {:?}",
                T::PRECISION
            )));
        }
        let meta_len = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * prec)?;
            let data = raw.chunks(prec).map(T::read_le).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn write_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    std::fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_byte_exact(
            values in prop::collection::vec(any::<f32>(), 0..40),
            meta in "[a-z =\n]{0,30}",
        ) {
            let t = Tensor::new(vec![values.len()], values).unwrap();
            let ckpt = Checkpoint { metadata: meta, tensors: vec![("w".into(), t), ("s".into(), Tensor::scalar(1.5f32))] };
            let bytes = ckpt.encode();
            let back = Checkpoint::<f32>::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let ckpt = Checkpoint {
            metadata: String::new(),
            tensors: vec![("x".into(), Tensor::<f32>::eye(2))],
        };
        let err = Checkpoint::<f64>::decode(&ckpt.encode()).unwrap_err();
        assert!(err.to_string().contains("F32"));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let ckpt = Checkpoint {
            metadata: "a = 1".into(),
            tensors: vec![("x".into(), Tensor::<f64>::eye(3))],
        };
        let bytes = ckpt.encode();
        assert!(Checkpoint::<f64>::decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::<f64>::decode(b"NOTACKPT").is_err());
    }
}
