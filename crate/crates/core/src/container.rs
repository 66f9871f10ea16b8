//! Self-describing named-array container.
//!
//! Layout: the 8-byte magic `MGNTARR1`, a little-endian `u32` header length,
//! a JSON header, then the raw little-endian payloads in offset order.
//! `byte_offset` is measured from the first payload byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::ContainerError;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MGNTARR1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::I64(_) => "i64",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    byte_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    arrays: Vec<ArrayEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    arrays: Vec<NamedArray>,
    /// Free-form JSON metadata (configs, provenance).
    pub meta: serde_json::Value,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|a| a.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.iter().any(|a| a.name == name)
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: ArrayData) -> Result<(), ContainerError> {
        if self.contains(name) {
            return Err(ContainerError::Duplicate(name.to_string()));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ContainerError::Header(format!(
                "array `{name}` has {} values but shape {shape:?}",
                data.len()
            )));
        }
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape,
            data,
        });
        Ok(())
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<(), ContainerError> {
        self.push(name, shape.to_vec(), ArrayData::F64(data))
    }

    pub fn push_i64(&mut self, name: &str, shape: &[usize], data: Vec<i64>) -> Result<(), ContainerError> {
        self.push(name, shape.to_vec(), ArrayData::I64(data))
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor) -> Result<(), ContainerError> {
        self.push_f64(name, &[t.rows(), t.cols()], t.data().to_vec())
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray, ContainerError> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| ContainerError::Missing(name.to_string()))
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64]), ContainerError> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::F64(v) => Ok((&a.shape, v)),
            other => Err(ContainerError::Type {
                name: name.to_string(),
                expected: "f64".into(),
                found: other.dtype().into(),
            }),
        }
    }

    pub fn i64(&self, name: &str) -> Result<(&[usize], &[i64]), ContainerError> {
        let a = self.get(name)?;
        match &a.data {
            ArrayData::I64(v) => Ok((&a.shape, v)),
            other => Err(ContainerError::Type {
                name: name.to_string(),
                expected: "i64".into(),
                found: other.dtype().into(),
            }),
        }
    }

    /// Reads a rank-2 `f64` array as a matrix.
    pub fn tensor(&self, name: &str) -> Result<Tensor, ContainerError> {
        let (shape, data) = self.f64(name)?;
        if shape.len() != 2 {
            return Err(ContainerError::Type {
                name: name.to_string(),
                expected: "rank-2 array".into(),
                found: format!("shape {shape:?}"),
            });
        }
        Tensor::from_vec(shape[0], shape[1], data.to_vec())
            .map_err(|e| ContainerError::Header(e.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let mut offset = 0u64;
        let entries = self
            .arrays
            .iter()
            .map(|a| {
                let e = ArrayEntry {
                    name: a.name.clone(),
                    dtype: a.data.dtype().to_string(),
                    shape: a.shape.clone(),
                    byte_offset: offset,
                };
                offset += 8 * a.data.len() as u64;
                e
            })
            .collect();
        let header = Header {
            format: "MGNTARR1".into(),
            version: FORMAT_VERSION,
            arrays: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ContainerError::Header(e.to_string()))?;
        let header_len =
            u32::try_from(json.len()).map_err(|_| ContainerError::Header("header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            match &a.data {
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 12 {
            return Err(ContainerError::Truncated("preamble"));
        }
        if &bytes[..8] != MAGIC {
            return Err(ContainerError::Magic);
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let payload_start = 12 + header_len;
        if bytes.len() < payload_start {
            return Err(ContainerError::Truncated("header"));
        }
        let header: Header =
            serde_json::from_slice(&bytes[12..payload_start]).map_err(|e| ContainerError::Header(e.to_string()))?;
        if header.format != "MGNTARR1" {
            return Err(ContainerError::Header(format!("format tag `{}`", header.format)));
        }
        if header.version != FORMAT_VERSION {
            return Err(ContainerError::Header(format!("unsupported version {}", header.version)));
        }
        let payload = &bytes[payload_start..];
        let mut c = Container {
            arrays: Vec::with_capacity(header.arrays.len()),
            meta: header.meta,
        };
        let mut expected_offset = 0u64;
        for e in header.arrays {
            if e.byte_offset != expected_offset {
                return Err(ContainerError::Header(format!(
                    "array `{}` at offset {} (expected {expected_offset})",
                    e.name, e.byte_offset
                )));
            }
            let n: usize = e.shape.iter().product();
            let start = e.byte_offset as usize;
            let end = start + 8 * n;
            if payload.len() < end {
                return Err(ContainerError::Truncated("payload"));
            }
            let chunks = payload[start..end].chunks_exact(8);
            let data = match e.dtype.as_str() {
                "f64" => ArrayData::F64(chunks.map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect()),
                "i64" => ArrayData::I64(chunks.map(|b| i64::from_le_bytes(b.try_into().expect("8 bytes"))).collect()),
                other => return Err(ContainerError::Header(format!("unknown dtype `{other}`"))),
            };
            expected_offset = end as u64;
            c.push(&e.name, e.shape, data)?;
        }
        if payload.len() as u64 != expected_offset {
            return Err(ContainerError::Header("trailing bytes after payload".into()));
        }
        Ok(c)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_matches_format() {
        let mut c = Container::new();
        c.push_f64("a", &[2], vec![1.0, 2.0]).unwrap();
        c.push_i64("b", &[1, 1], vec![-3]).unwrap();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"MGNTARR1");
        let hl = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hl]).unwrap();
        assert_eq!(header["arrays"][1]["byte_offset"], 16);
        assert_eq!(header["arrays"][1]["dtype"], "i64");
        assert_eq!(bytes.len(), 12 + hl + 24);
        assert_eq!(&bytes[12 + hl..12 + hl + 8], &1.0f64.to_le_bytes());
    }

    #[test]
    fn scalar_arrays_have_empty_shape() {
        let mut c = Container::new();
        c.push_f64("kappa", &[], vec![0.2]).unwrap();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.f64("kappa").unwrap().1, &[0.2]);
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(matches!(Container::from_bytes(b"NOTMAGIC0000"), Err(ContainerError::Magic)));
        let mut c = Container::new();
        c.push_f64("x", &[3], vec![1.0; 3]).unwrap();
        let bytes = c.to_bytes().unwrap();
        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() - 1]),
            Err(ContainerError::Truncated(_))
        ));
        assert!(matches!(c.i64("x"), Err(ContainerError::Type { .. })));
        assert!(matches!(c.get("y"), Err(ContainerError::Missing(_))));
        assert!(c.push_f64("x", &[1], vec![0.0]).is_err());
        assert!(c.push_f64("z", &[2, 2], vec![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn write_read_write_is_byte_identical(
            values in proptest::collection::vec(any::<f64>(), 0..40),
            ints in proptest::collection::vec(any::<i64>(), 0..20),
            key in "[a-z]{1,8}",
        ) {
            let mut c = Container::new();
            c.push_f64("values", &[values.len()], values).unwrap();
            c.push_i64("ints", &[ints.len(), 1], ints).unwrap();
            c.meta = serde_json::json!({ key: [1, 2.5, "s"] });
            let first = c.to_bytes().unwrap();
            let second = Container::from_bytes(&first).unwrap().to_bytes().unwrap();
            prop_assert_eq!(first, second);
        }
    }
}
