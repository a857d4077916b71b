//! Named-array container used for dataset packs and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"SVPACK01" or b"SVCKPT01"
//! header_len u64
//! header     header_len bytes of UTF-8 JSON:
//!            {"meta": <any>, "arrays": [{"name", "shape", "offset"}, ...]}
//! payload    f64 values; array `offset` is counted in values from the
//!            start of the payload
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PACK_MAGIC: &[u8; 8] = b"SVPACK01";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SVCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// In-memory container: JSON metadata plus ordered named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn new(meta: serde_json::Value) -> Self {
        TensorFile { meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.arrays.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing array {name}")))
    }

    pub fn to_bytes(&self, magic: &[u8; 8]) -> Result<Vec<u8>> {
        let mut offset = 0;
        let arrays = self
            .arrays
            .iter()
            .map(|(name, t)| {
                let e = ArrayEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += t.numel();
                e
            })
            .collect();
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            arrays,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
        out.extend_from_slice(magic);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 8]) -> Result<Self> {
        let fail = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 16 {
            return Err(fail("file too short"));
        }
        if &bytes[..8] != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                String::from_utf8_lossy(magic)
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let hend = 16usize.checked_add(hlen).ok_or_else(|| fail("header length overflow"))?;
        if bytes.len() < hend {
            return Err(fail("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..hend])?;
        let payload = &bytes[hend..];
        if !payload.len().is_multiple_of(8) {
            return Err(fail("payload is not a whole number of f64 values"));
        }
        let n_values = payload.len() / 8;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let numel: usize = e.shape.iter().product();
            if e.offset + numel > n_values {
                return Err(Error::Format(format!("array {} runs past the payload", e.name)));
            }
            let data = payload[e.offset * 8..(e.offset + numel) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((e.name, Tensor::new(e.shape, data)?));
        }
        Ok(TensorFile {
            meta: header.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path, magic: &[u8; 8]) -> Result<()> {
        std::fs::write(path, self.to_bytes(magic)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, magic)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut f = TensorFile::new(serde_json::json!({"story_id": "s1", "n": 3}));
        f.push("a", Tensor::from_rows(&[vec![1.0, -2.5], vec![f64::MIN_POSITIVE, 1e300]]).unwrap());
        f.push("b", Tensor::scalar(7.0));
        let bytes = f.to_bytes(PACK_MAGIC).unwrap();
        assert_eq!(&bytes[..8], PACK_MAGIC);
        assert_eq!(TensorFile::from_bytes(&bytes, PACK_MAGIC).unwrap(), f);
        assert!(TensorFile::from_bytes(&bytes, CHECKPOINT_MAGIC).is_err());
        assert!(TensorFile::from_bytes(&bytes[..bytes.len() - 3], PACK_MAGIC).is_err());
    }
}
