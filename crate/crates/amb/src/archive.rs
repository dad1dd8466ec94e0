//! Binary tensor-archive format.
//!
//! Layout, byte-exact:
//!
//! ```text
//! [8 bytes]  header length N, little-endian u64
//! [N bytes]  UTF-8 JSON header: {"name": {"dtype": "f32", "shape": [..],
//!            "byte_offset": O, "byte_length": L}, ...}
//! [..]       payload: raw little-endian IEEE-754 values, one tensor after
//!            another; offsets are relative to the payload start
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{DType, Scalar, Tensor};

/// Header record for one stored tensor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchiveEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad archive header: {0}")]
    BadHeader(String),
    #[error("tensor {name}: payload truncated, need {needed} bytes at offset {offset}, archive payload holds {available}")]
    Truncated {
        name: String,
        offset: u64,
        needed: u64,
        available: u64,
    },
    #[error("tensor {name}: dtype {found} does not match requested {expected}")]
    DtypeMismatch {
        name: String,
        expected: DType,
        found: DType,
    },
    #[error("tensor {name}: header length {header_len} bytes disagrees with shape {shape:?}")]
    LengthMismatch {
        name: String,
        shape: Vec<usize>,
        header_len: u64,
    },
    #[error("archive is missing tensor {0}")]
    MissingTensor(String),
    #[error("archive holds unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Writes named tensors to `path`. Payload order follows iteration order.
pub fn save<'a, T, I>(tensors: I, path: &Path) -> Result<(), ArchiveError>
where
    T: Scalar + 'a,
    I: IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
{
    let mut header = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, tensor) in tensors {
        let byte_offset = payload.len() as u64;
        for v in tensor.data() {
            v.write_le(&mut payload);
        }
        header.insert(
            name.to_string(),
            ArchiveEntry {
                dtype: T::DTYPE,
                shape: tensor.shape().to_vec(),
                byte_offset,
                byte_length: payload.len() as u64 - byte_offset,
            },
        );
    }
    let header_json =
        serde_json::to_vec(&header).map_err(|e| ArchiveError::BadHeader(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

/// Parses only the header of an archive.
pub fn read_header(path: &Path) -> Result<BTreeMap<String, ArchiveEntry>, ArchiveError> {
    let mut r = BufReader::new(File::open(path)?);
    read_header_from(&mut r)
}

fn read_header_from<R: Read>(r: &mut R) -> Result<BTreeMap<String, ArchiveEntry>, ArchiveError> {
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)
        .map_err(|_| ArchiveError::BadHeader("file shorter than the 8-byte length prefix".into()))?;
    let header_len = u64::from_le_bytes(len_bytes);
    let mut header_bytes = vec![0u8; header_len as usize];
    r.read_exact(&mut header_bytes)
        .map_err(|_| ArchiveError::BadHeader(format!("declared header length {header_len} exceeds file size")))?;
    serde_json::from_slice(&header_bytes).map_err(|e| ArchiveError::BadHeader(e.to_string()))
}

/// Reads every tensor from an archive. All entries must carry `T`'s dtype.
pub fn load<T: Scalar>(path: &Path) -> Result<BTreeMap<String, Tensor<T>>, ArchiveError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_from(&mut r)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut out = BTreeMap::new();
    for (name, entry) in header {
        if entry.dtype != T::DTYPE {
            return Err(ArchiveError::DtypeMismatch {
                name,
                expected: T::DTYPE,
                found: entry.dtype,
            });
        }
        let numel: usize = entry.shape.iter().product();
        let width = entry.dtype.byte_width();
        if entry.byte_length as usize != numel * width {
            return Err(ArchiveError::LengthMismatch {
                name,
                shape: entry.shape,
                header_len: entry.byte_length,
            });
        }
        let start = entry.byte_offset as usize;
        let end = start + entry.byte_length as usize;
        if end > payload.len() {
            return Err(ArchiveError::Truncated {
                name,
                offset: entry.byte_offset,
                needed: entry.byte_length,
                available: payload.len() as u64,
            });
        }
        let data: Vec<T> = payload[start..end]
            .chunks_exact(width)
            .map(T::read_le)
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|_| {
            ArchiveError::LengthMismatch {
                name: name.clone(),
                shape: entry.shape.clone(),
                header_len: entry.byte_length,
            }
        })?;
        out.insert(name, tensor);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> tempfile::TempDir {
        let _ = name;
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tmp("rt");
        let path = dir.path().join("weights.tensors");
        let a = Tensor::<f32>::from_fn(vec![2, 3], |i| (i as f32 * 0.37).sin());
        let b = Tensor::<f32>::from_fn(vec![4], |i| -(i as f32) / 7.0);
        save([("a", &a), ("b", &b)], &path).unwrap();
        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded["a"].shape(), a.shape());
        assert!(loaded["a"]
            .data()
            .iter()
            .zip(a.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(loaded["b"]
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn hand_built_archive_parses() {
        // Written byte-by-byte here, independent of `save`.
        let dir = tmp("hand");
        let path = dir.path().join("fixture.tensors");
        let header = serde_json::json!({
            "x": {"dtype": "f32", "shape": [2], "byte_offset": 0, "byte_length": 8},
            "y": {"dtype": "f32", "shape": [1, 2], "byte_offset": 8, "byte_length": 8},
        });
        let header_bytes = serde_json::to_vec(&header).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header_bytes);
        for v in [1.5f32, -2.0, 0.25, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, bytes).unwrap();

        let loaded = load::<f32>(&path).unwrap();
        assert_eq!(loaded["x"].data(), &[1.5, -2.0]);
        assert_eq!(loaded["y"].shape(), &[1, 2]);
        assert_eq!(loaded["y"].data(), &[0.25, 3.0]);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tmp("trunc");
        let path = dir.path().join("bad.tensors");
        let t = Tensor::<f32>::from_fn(vec![8], |i| i as f32);
        save([("w", &t)], &path).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 4]).unwrap();
        let err = load::<f32>(&path).unwrap_err();
        assert!(matches!(err, ArchiveError::Truncated { .. }), "{err}");
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let dir = tmp("dtype");
        let path = dir.path().join("w64.tensors");
        let t = Tensor::<f64>::from_fn(vec![3], |i| i as f64);
        save([("w", &t)], &path).unwrap();
        let err = load::<f32>(&path).unwrap_err();
        assert!(matches!(err, ArchiveError::DtypeMismatch { .. }), "{err}");
    }

    #[test]
    fn garbage_header_is_reported() {
        let dir = tmp("garbage");
        let path = dir.path().join("junk.tensors");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(5u64).to_le_bytes());
        bytes.extend_from_slice(b"hello");
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load::<f32>(&path).unwrap_err(),
            ArchiveError::BadHeader(_)
        ));
    }
}
