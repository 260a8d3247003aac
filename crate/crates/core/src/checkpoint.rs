//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BIMM" | u32 version | u64 config length | config JSON
//! u32 tensor count | per tensor: u32 name length, name, u8 dtype (0 = f32),
//!                    u32 rank, u64 dims.., u64 payload offset, u64 byte length
//! payload: f32 values of every tensor in directory order
//! ```
//!
//! Offsets are relative to the start of the payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"BIMM";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

pub fn encode_checkpoint(store: &ParamStore<f32>, config: &serde_json::Value) -> Result<Vec<u8>> {
    let cfg = serde_json::to_vec(config)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let length = 4 * p.value.numel() as u64;
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&length.to_le_bytes());
        offset += length;
    }
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Corruption(format!("header ends early at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
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

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamStore<f32>, serde_json::Value)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing BIMM magic".into()));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let cfg_len = r.u64()? as usize;
    let config: serde_json::Value = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::Corruption(format!("config blob: {e}")))?;
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("tensor {name}: unknown dtype {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()?;
        let length = r.u64()?;
        entries.push(TensorEntry {
            name,
            shape,
            offset,
            length,
        });
    }
    let payload = &bytes[r.pos..];
    let mut store = ParamStore::new();
    let mut expected_offset = 0u64;
    for e in entries {
        let numel: usize = e.shape.iter().product();
        if e.length != 4 * numel as u64 || e.offset != expected_offset {
            return Err(Error::Corruption(format!("tensor {} has an inconsistent directory entry", e.name)));
        }
        expected_offset += e.length;
        let end = e.offset.checked_add(e.length).filter(|&x| x <= payload.len() as u64).ok_or_else(|| {
            Error::Corruption(format!("payload truncated inside tensor {}", e.name))
        })?;
        let data = payload[e.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        store
            .insert(e.name.clone(), Tensor::new(e.shape, data)?)
            .map_err(|_| Error::Corruption(format!("duplicate tensor {}", e.name)))?;
    }
    if expected_offset != payload.len() as u64 {
        return Err(Error::Corruption(format!(
            "{} trailing payload bytes",
            payload.len() as u64 - expected_offset
        )));
    }
    Ok((store, config))
}

pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>, config: &serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(store, config)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, serde_json::Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("b.w", Tensor::new(vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e30, -7.25]).unwrap())
            .unwrap();
        s.insert("a.bias", Tensor::new(vec![0], vec![]).unwrap()).unwrap();
        s.insert("c", Tensor::scalar(0.1)).unwrap();
        s
    }

    #[test]
    fn round_trip_keeps_bits_and_order() {
        let cfg = serde_json::json!({"depth": 4});
        let bytes = encode_checkpoint(&sample(), &cfg).unwrap();
        let (s, c) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(c, cfg);
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["b.w", "a.bias", "c"]);
        for ((_, a), (_, b)) in s.iter().zip(sample().iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
            assert_eq!(a.value.shape(), b.value.shape());
        }
    }

    #[test]
    fn distinct_failures() {
        let bytes = encode_checkpoint(&sample(), &serde_json::json!({})).unwrap();
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut v = bytes.clone();
        v[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(decode_checkpoint(&v), Err(Error::Version { found: 99, expected: 1 })));
        for cut in [10, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Corruption(_))), "cut {cut}");
        }
    }

    proptest! {
        #[test]
        fn arbitrary_values_round_trip(vals in proptest::collection::vec(any::<u32>(), 0..40)) {
            let mut s = ParamStore::new();
            let data: Vec<f32> = vals.iter().map(|&b| f32::from_bits(b)).collect();
            s.insert("x", Tensor::new(vec![data.len()], data).unwrap()).unwrap();
            let (back, _) = decode_checkpoint(&encode_checkpoint(&s, &serde_json::Value::Null).unwrap()).unwrap();
            let got: Vec<u32> = back.value("x").unwrap().data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, vals);
        }
    }
}
