//! Binary checkpoint format.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "NDCR" | version | entry count
//! per entry: name length | UTF-8 name | rank | dims... | f32 payload (LE)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::Reader;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"NDCR";
pub const VERSION: u32 = 1;

/// Serialize every parameter in store order.
pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {magic:?}, expected \"NDCR\""),
        ));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let at = r.offset();
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(at + 4, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(
                r.offset() - 4,
                format!("implausible rank {rank}"),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(r.offset(), "tensor size overflows"))?;
        let data = r.f32s(numel)?;
        let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
        store
            .insert(name, t)
            .map_err(|e| Error::format(at, e.to_string()))?;
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), "trailing bytes after last entry"));
    }
    Ok(store)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert(
            "a.w",
            Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap(),
        )
        .unwrap();
        s.insert("b", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn byte_exact_round_trip() {
        let bytes = encode(&sample());
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        assert_eq!(back.get("b").unwrap().shape(), &[3]);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(matches!(
            decode(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&sample());
        let cut = &bytes[..bytes.len() - 3];
        match decode(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 12),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
