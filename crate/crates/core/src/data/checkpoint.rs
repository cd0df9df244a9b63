//! Binary checkpoint format:
//!
//! ```text
//! "MMUN" | u32 version | u32 tensor count
//! per tensor: u16 name length | name (UTF-8) | u8 ndim | ndim × u64 extents
//!             | u8 dtype tag | little-endian payload
//! ```
//!
//! All integers are little-endian. Dtype tag 0 is f32, 1 is f64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};
use crate::params::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"MMUN";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint<T: Element>(params: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.numel() * T::DTYPE.size_of());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.len()).map_err(|_| Error::config("too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::config(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let ndim = u8::try_from(t.ndim()).map_err(|_| Error::config(format!("{name}: too many axes")))?;
        out.push(ndim);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.push(T::DTYPE.tag());
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a whole checkpoint; nothing is returned unless every record is valid.
pub fn decode_checkpoint<T: Element>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut store = ParamStore::new();
    for i in 0..count {
        let record = r.pos as u64;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(record + 2, format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let at = r.pos as u64;
            let e = usize::try_from(r.u64("extent")?)
                .map_err(|_| Error::format(at, format!("{name}: extent overflows")))?;
            shape.push(e);
        }
        let tag_at = r.pos as u64;
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::format(tag_at, format!("{name}: unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(Error::format(
                tag_at,
                format!("{name}: stored as {dtype:?}, requested {:?}", T::DTYPE),
            ));
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::format(record, format!("{name}: element count overflows")))?;
        let size = dtype.size_of();
        let raw = r.take(
            numel.checked_mul(size).ok_or_else(|| Error::format(record, "payload size overflows"))?,
            &format!("{name} payload"),
        )?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(record, format!("{name}: {e}")))?;
        store
            .insert(name, t)
            .map_err(|e| Error::format(record, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last tensor"));
    }
    Ok(store)
}

pub fn save_checkpoint<T: Element>(path: &Path, params: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<ParamStore<T>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads a checkpoint and checks it against the tensors `spec` declares.
pub fn load_model<T: Element>(path: &Path, spec: ModelSpec) -> Result<Model<T>> {
    let params = load_checkpoint(path)?;
    Model::from_params(spec, params).map_err(|e| match e {
        Error::Shape(msg) | Error::Config(msg) => Error::format(0, format!("checkpoint does not match model: {msg}")),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.weight".into(), Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]).unwrap())
            .unwrap();
        s.insert("b".into(), Tensor::scalar(42.0)).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let back: ParamStore<f32> = decode_checkpoint(&encode_checkpoint(&s).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        for (name, t) in s.iter() {
            assert!(t.bit_eq(back.get(name).unwrap()));
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode_checkpoint(&store()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint::<f32>(&bad), Err(Error::Format { offset: 4, .. })));
        for cut in [3, 11, 20, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint::<f32>(&bytes[..cut]), Err(Error::Format { .. })));
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint::<f32>(&long).is_err());
        assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(Error::Format { .. })));
    }
}
