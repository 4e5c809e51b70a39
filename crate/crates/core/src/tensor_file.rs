//! Portable f32 tensor files.
//!
//! Layout: the 4-byte magic `SDGT`, a little-endian `u32` header length, a
//! UTF-8 JSON header `{"dtype":"f32","shape":[..],"byte_order":"little"}`,
//! then the row-major little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDGT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    byte_order: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header { dtype: "f32".into(), shape: self.shape.clone(), byte_order: "little".into() };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[8..header_end]).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        if header.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
        }
        if header.byte_order != "little" {
            return Err(Error::Format(format!("unsupported byte order {}", header.byte_order)));
        }
        let count: usize = header.shape.iter().product();
        let payload = &bytes[header_end..];
        if payload.len() != 4 * count {
            return Err(Error::Format(format!(
                "payload has {} bytes, shape {:?} needs {}",
                payload.len(),
                header.shape,
                4 * count
            )));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { shape: header.shape, data })
    }
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&tensor.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorFile::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_roundtrip_with_24_payload_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.sdgt");
        let t = TensorFile::new(vec![2, 3], vec![0.0; 6]).unwrap();
        save_tensor(&path, &t).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 8 - header_len, 24);
        assert_eq!(load_tensor(&path).unwrap(), t);
    }

    #[test]
    fn empty_tensor_is_valid() {
        let t = TensorFile::new(vec![0], vec![]).unwrap();
        let back = TensorFile::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = TensorFile::new(vec![1], vec![1.0]).unwrap().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = TensorFile::new(vec![4], vec![1.0; 4]).unwrap().to_bytes();
        let err = TensorFile::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let header = br#"{"dtype":"f64","shape":[1],"byte_order":"little"}"#;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(matches!(TensorFile::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_tensor("/nonexistent/x.sdgt"), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            bits in prop::collection::vec(any::<u32>(), 0..64),
        ) {
            // arbitrary bit patterns, NaN payloads included
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            let t = TensorFile::new(vec![data.len()], data).unwrap();
            let back = TensorFile::from_bytes(&t.to_bytes()).unwrap();
            let a: Vec<u32> = t.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(t.shape, back.shape);
        }
    }
}
