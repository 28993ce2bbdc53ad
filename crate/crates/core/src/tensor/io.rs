//! Named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"NTEN"
//! version  u32
//! width    u8       bytes per scalar (4 = f32, 8 = f64)
//! count    u64
//! count × { name_len u32, name utf-8, rank u32, extents u64 × rank, payload }
//! ```
//!
//! Tensors are written in ascending name order so equal maps produce equal
//! bytes.

use std::collections::BTreeMap;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TENSOR_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"NTEN";

pub type NamedTensors<T> = BTreeMap<String, Tensor<T>>;

pub fn encode_named_tensors<T: Scalar>(tensors: &NamedTensors<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&TENSOR_FORMAT_VERSION.to_le_bytes());
    out.push(T::BYTES as u8);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
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
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format { path: self.origin.to_string(), reason: reason.into() }
    }
}

/// Decodes a container, converting the stored element width to `T` if needed.
pub fn decode_named_tensors<T: Scalar>(bytes: &[u8], origin: &str) -> Result<NamedTensors<T>> {
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(4)? != MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.u32()?;
    if version != TENSOR_FORMAT_VERSION {
        return Err(r.err(format!("unsupported format version {version}")));
    }
    let width = r.take(1)?[0] as usize;
    if width != 4 && width != 8 {
        return Err(r.err(format!("unsupported scalar width {width}")));
    }
    let count = r.u64()?;
    let mut out = NamedTensors::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| r.err("tensor name is not utf-8"))?.to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(width).ok_or_else(|| r.err("extent overflow"))?)?;
        let data: Vec<T> = payload
            .chunks_exact(width)
            .map(|b| if width == 4 { T::from_f64_lossy(f32::read_le(b) as f64) } else { T::from_f64_lossy(f64::read_le(b)) })
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| r.err(format!("tensor {name}: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(r.err(format!("duplicate tensor name {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(out)
}

pub fn write_named_tensors<T: Scalar>(path: impl AsRef<Path>, tensors: &NamedTensors<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_named_tensors(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_named_tensors<T: Scalar>(path: impl AsRef<Path>) -> Result<NamedTensors<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_named_tensors(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let mut m = NamedTensors::<f32>::new();
        m.insert("w".into(), Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap());
        let b = encode_named_tensors(&m);
        assert_eq!(&b[..4], b"NTEN");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(b[8], 4);
        assert_eq!(u64::from_le_bytes(b[9..17].try_into().unwrap()), 1);
        assert_eq!(b.len(), 17 + 4 + 1 + 4 + 16 + 8);
        assert_eq!(&b[b.len() - 4..], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn truncated_input_is_rejected() {
        let mut m = NamedTensors::<f64>::new();
        m.insert("a".into(), Tensor::vector(vec![1.0, 2.0, 3.0]));
        let b = encode_named_tensors(&m);
        assert!(decode_named_tensors::<f64>(&b[..b.len() - 1], "x").is_err());
        assert!(decode_named_tensors::<f64>(b"NOPE", "x").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            tensors in prop::collection::btree_map(
                "[a-z.]{1,12}",
                (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
                    prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), r * c)
                        .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
                }),
                0..5,
            )
        ) {
            let bytes = encode_named_tensors(&tensors);
            let back: NamedTensors<f32> = decode_named_tensors(&bytes, "mem").unwrap();
            prop_assert_eq!(encode_named_tensors(&back), bytes);
        }
    }
}
