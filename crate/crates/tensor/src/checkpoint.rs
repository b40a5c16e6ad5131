//! Tensor container file.
//!
//! Layout:
//!
//! ```text
//! [0..8)        header length H, u64 little-endian
//! [8..8+H)      UTF-8 JSON header
//! zero padding  up to the next multiple of 8
//! payload       little-endian f64 values
//! ```
//!
//! Each header entry names a tensor, its shape and the byte offset of its
//! first value relative to the start of the payload section. Offsets are
//! multiples of 8 and the payload section itself starts 8-byte aligned.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const FORMAT: &str = "ashnet-tensors";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<HeaderEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Named tensors plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(HeaderEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.numel() as u64;
        }
        let header = serde_json::to_vec(&Header {
            format: FORMAT.into(),
            version: 1,
            metadata: self.metadata.clone(),
            tensors: entries,
        })
        .map_err(|e| TensorError::Format(e.to_string()))?;
        let start = align8(8 + header.len());
        let mut out = Vec::with_capacity(start + offset as usize);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(start, 0);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| TensorError::Format("file shorter than the 8-byte length prefix".into()))?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header_bytes = bytes
            .get(8..8 + header_len)
            .ok_or_else(|| TensorError::Format(format!("header of {header_len} bytes truncated")))?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| TensorError::Format(format!("bad header: {e}")))?;
        if header.format != FORMAT || header.version != 1 {
            return Err(TensorError::Format(format!(
                "unsupported container {} v{}",
                header.format, header.version
            )));
        }
        let start = align8(8 + header_len);
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            if e.offset % 8 != 0 {
                return Err(TensorError::Format(format!("{} has unaligned offset {}", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let begin = start + e.offset as usize;
            let payload = bytes.get(begin..begin + 8 * n).ok_or_else(|| {
                TensorError::Format(format!("payload of {} truncated at byte {begin}", e.name))
            })?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            tensors.push((e.name, Tensor::new(&e.shape, data)?));
        }
        Ok(Checkpoint {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut rng = seeded(3);
        Checkpoint {
            metadata: BTreeMap::from([("seed".to_string(), "3".to_string())]),
            tensors: vec![
                ("a.w".into(), Tensor::randn(&[3, 2], 1.0, &mut rng)),
                ("b".into(), Tensor::randn(&[5], 1.0, &mut rng)),
            ],
        }
    }

    #[test]
    fn offsets_are_aligned_and_little_endian() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let start = align8(8 + header_len);
        assert_eq!(start % 8, 0);
        let first = f64::from_le_bytes(bytes[start..start + 8].try_into().unwrap());
        assert_eq!(first, ck.tensors[0].1.data()[0]);
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + header_len]).unwrap();
        assert_eq!(header["tensors"][1]["offset"], 48);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn truncation_is_reported() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_values_survive_bytes(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let n = values.len();
            let ck = Checkpoint {
                metadata: BTreeMap::new(),
                tensors: vec![("x".into(), Tensor::new(&[n], values).unwrap())],
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
