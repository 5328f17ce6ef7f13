//! Named tensor maps and the binary weight-file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "FLXS"            4 bytes magic
//! version           u32
//! header_len        u32
//! header            header_len bytes of UTF-8 JSON
//! payload           f64 values, row-major, in manifest order
//! ```
//!
//! The header holds the model kind, its configuration, the tensor manifest
//! (name, shape, offset and length in `f64` elements) and the CRC32 of the
//! payload bytes. Tensors are written in name order, so encoding a map is
//! canonical: decoding and re-encoding yields identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"FLXS";
pub const FORMAT_VERSION: u32 = 1;

/// Parameters keyed by name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamMap(BTreeMap<String, Tensor>);

impl ParamMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.0.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        )
    }

    /// Checks that `name` exists with exactly `shape`.
    pub fn expect_shape(&self, name: &str, shape: &[usize]) -> Result<()> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::Config(format!(
                "parameter `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    tensors: Vec<ManifestEntry>,
    crc32: u32,
}

/// Decoded contents of a weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: ParamMap,
}

impl WeightFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            tensors.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel(),
            });
            offset += t.numel();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors,
            crc32: crc32fast::hash(&payload),
        };
        let header = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Format("header larger than 4 GiB".into()))?;

        let mut out = Vec::with_capacity(12 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Format("file shorter than the fixed preamble".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
        let payload = &bytes[header_end..];

        let mut expected = 0usize;
        for entry in &header.tensors {
            let numel: usize = entry.shape.iter().product();
            if entry.offset != expected || entry.len != numel {
                return Err(Error::Format(format!(
                    "manifest entry `{}` is not contiguous",
                    entry.name
                )));
            }
            expected += entry.len;
        }
        if payload.len() != expected * 8 {
            return Err(Error::Format(format!(
                "payload holds {} bytes, manifest needs {}",
                payload.len(),
                expected * 8
            )));
        }
        if crc32fast::hash(payload) != header.crc32 {
            return Err(Error::Format("payload checksum mismatch".into()));
        }

        let mut params = ParamMap::new();
        for entry in header.tensors {
            let data = payload[entry.offset * 8..(entry.offset + entry.len) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if params.contains(&entry.name) {
                return Err(Error::Format(format!("duplicate tensor `{}`", entry.name)));
            }
            params.insert(entry.name, Tensor::new(entry.shape, data)?);
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
