//! Named-tensor container used for pre-trained weights and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "APGANWM\0"
//! version  u32
//! hlen     u64       length of the JSON header
//! header   hlen      {"units": [...], "metadata": {...}, "tensors": [{name, dtype, shape, offset, len}]}
//! data     ...       raw tensor buffers, offsets relative to the start of this section
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"APGANWM\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeTag {
    F32,
    F64,
}

impl DTypeTag {
    pub fn size(self) -> usize {
        match self {
            DTypeTag::F32 => 4,
            DTypeTag::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub dtype: DTypeTag,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: DTypeTag,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(default)]
    units: Vec<String>,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
    tensors: Vec<HeaderEntry>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightManifest {
    /// Unfreeze-unit names, nearest-to-head first.
    pub units: Vec<String>,
    pub metadata: BTreeMap<String, serde_json::Value>,
    tensors: BTreeMap<String, TensorEntry>,
}

impl WeightManifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let shape = tensor.dims().to_vec();
        let flat = tensor.flatten_all()?;
        let (dtype, data) = match tensor.dtype() {
            DType::F64 => (
                DTypeTag::F64,
                flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
            _ => (
                DTypeTag::F32,
                flat.to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect(),
            ),
        };
        self.tensors
            .insert(name.to_string(), TensorEntry { dtype, shape, data });
        Ok(())
    }

    pub fn insert_f32(&mut self, name: &str, shape: &[usize], values: &[f32]) {
        self.tensors.insert(
            name.to_string(),
            TensorEntry {
                dtype: DTypeTag::F32,
                shape: shape.to_vec(),
                data: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &TensorEntry)> {
        self.tensors.iter()
    }

    pub fn remove(&mut self, name: &str) -> Option<TensorEntry> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, name: &str, device: &Device) -> Result<Tensor> {
        let e = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensors(vec![name.to_string()]))?;
        let t = match e.dtype {
            DTypeTag::F32 => {
                let v: Vec<f32> = e
                    .data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), device)?
            }
            DTypeTag::F64 => {
                let v: Vec<f64> = e
                    .data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), device)?
            }
        };
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, e) in &self.tensors {
            entries.push(HeaderEntry {
                name: name.clone(),
                dtype: e.dtype,
                shape: e.shape.clone(),
                offset,
                len: e.data.len(),
            });
            offset += e.data.len();
        }
        let header = Header {
            units: self.units.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::CorruptFile(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for e in self.tensors.values() {
            out.extend_from_slice(&e.data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 {
            return Err(Error::CorruptFile(format!(
                "{} bytes is shorter than the fixed preamble",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::CorruptFile("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::CorruptFile("header extends past end of file".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..data_start]).map_err(|e| Error::CorruptFile(format!("header: {e}")))?;
        let data = &bytes[data_start..];
        let mut tensors = BTreeMap::new();
        for h in header.tensors {
            let expected = h.shape.iter().product::<usize>() * h.dtype.size();
            if h.len != expected {
                return Err(Error::CorruptFile(format!(
                    "tensor `{}` declares {} bytes but shape {:?} needs {expected}",
                    h.name, h.len, h.shape
                )));
            }
            let end = h
                .offset
                .checked_add(h.len)
                .filter(|&end| end <= data.len())
                .ok_or_else(|| Error::CorruptFile(format!("tensor `{}` is truncated", h.name)))?;
            tensors.insert(
                h.name,
                TensorEntry {
                    dtype: h.dtype,
                    shape: h.shape,
                    data: data[h.offset..end].to_vec(),
                },
            );
        }
        Ok(Self {
            units: header.units,
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> WeightManifest {
        let mut m = WeightManifest::new();
        m.units = vec!["a".into(), "b".into()];
        m.metadata.insert("kind".into(), serde_json::json!("test"));
        m.insert_f32("w", &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        m.insert("d", &Tensor::new(&[0.5f64, -1.25], &Device::Cpu).unwrap())
            .unwrap();
        m
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, 25, bytes.len() - 1] {
            let err = WeightManifest::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::CorruptFile(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            WeightManifest::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 7, expected: 1 })
        ));
    }

    #[test]
    fn tensors_decode_with_shape() {
        let m = WeightManifest::from_bytes(&sample().to_bytes().unwrap()).unwrap();
        let w = m.tensor("w", &Device::Cpu).unwrap();
        assert_eq!(w.dims(), &[2, 3]);
        assert_eq!(m.tensor("d", &Device::Cpu).unwrap().dtype(), DType::F64);
        assert_eq!(m.units, vec!["a".to_string(), "b".to_string()]);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(values in proptest::collection::vec(-1e6f32..1e6, 1..64), units in proptest::collection::vec("[a-z]{1,8}", 0..4)) {
            let mut m = WeightManifest::new();
            m.units = units;
            m.insert_f32("t", &[values.len()], &values);
            let back = WeightManifest::from_bytes(&m.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
