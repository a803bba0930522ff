//! Weight container: one line of UTF-8 JSON manifest terminated by `\n`,
//! followed by little-endian `f32` payloads concatenated in manifest order.
//! Offsets and lengths are in bytes, relative to the first payload byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::Tensor;
use crate::error::{Error, Result};

const FORMAT: &str = "ndgrad-weights";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    #[serde(default)]
    metadata: Map<String, Value>,
    tensors: Vec<ContainerEntry>,
}

/// Named tensors plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightContainer {
    pub metadata: Map<String, Value>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl WeightContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> Vec<ContainerEntry> {
        let mut offset = 0u64;
        self.tensors
            .iter()
            .map(|(name, t)| {
                let length = 4 * t.numel() as u64;
                let e = ContainerEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    length,
                };
                offset += length;
                e
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            metadata: self.metadata.clone(),
            tensors: self.entries(),
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Container("missing manifest terminator".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..nl])?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Container(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let payload = &bytes[nl + 1..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expected_offset = 0u64;
        for e in manifest.tensors {
            let numel: usize = e.shape.iter().product();
            if e.length != 4 * numel as u64 || e.offset != expected_offset {
                return Err(Error::Container(format!("bad entry layout for {}", e.name)));
            }
            let start = e.offset as usize;
            let end = start + e.length as usize;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Container(format!("payload truncated at {}", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((e.name, Tensor::new(&e.shape, data)?));
            expected_offset = end as u64;
        }
        if expected_offset as usize != payload.len() {
            return Err(Error::Container("trailing bytes after payload".into()));
        }
        Ok(Self {
            metadata: manifest.metadata,
            tensors,
        })
    }
}

pub fn write_container(path: &Path, container: &WeightContainer) -> Result<()> {
    let bytes = container.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_container(path: &Path) -> Result<WeightContainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightContainer::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bit_exact_round_trip(bits in proptest::collection::vec(any::<u32>(), 0..64), split in 0usize..64) {
            let vals: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let k = split.min(vals.len());
            let mut c = WeightContainer::new();
            c.metadata.insert("latent_dim".into(), 16.into());
            c.push("a", Tensor::new(&[k], vals[..k].to_vec()).unwrap());
            c.push("b.weight", Tensor::new(&[1, vals.len() - k], vals[k..].to_vec()).unwrap());
            let bytes = c.to_bytes().unwrap();
            let back = WeightContainer::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            for ((_, x), (_, y)) in c.tensors.iter().zip(&back.tensors) {
                let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
        }
    }

    #[test]
    fn manifest_records_offsets() {
        let mut c = WeightContainer::new();
        c.push("x", Tensor::zeros(&[2, 3]));
        c.push("y", Tensor::zeros(&[4]));
        let e = c.entries();
        assert_eq!((e[0].offset, e[0].length), (0, 24));
        assert_eq!((e[1].offset, e[1].length), (24, 16));
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut c = WeightContainer::new();
        c.push("x", Tensor::ones(&[8]));
        let bytes = c.to_bytes().unwrap();
        assert!(WeightContainer::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(WeightContainer::from_bytes(b"{}").is_err());
    }
}
