//! On-disk formats: atomic writes, JSON documents, and the shared binary
//! tensor layout (raw little-endian f64 blobs described by a JSON manifest).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Serde adapter for `Vec<f64>` that writes NaN as `null` and reads it back.
pub mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let opt: Vec<Option<f64>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        opt.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let opt = Vec::<Option<f64>>::deserialize(d)?;
        Ok(opt.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn f64_to_le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_bytes_to_f64(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Invalid(format!("{} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn json_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Manifest entry for one tensor inside a binary blob.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the first element.
    pub offset: usize,
    pub dtype: String,
}

/// Concatenate tensors into one little-endian f64 blob at `path` and return
/// the manifest describing where each one lives.
pub fn save_tensors(path: &Path, tensors: &[(String, Tensor<f64>)]) -> Result<Vec<TensorEntry>> {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
            dtype: "f64".into(),
        });
        bytes.extend(f64_to_le_bytes(t.data()));
    }
    write_atomic(path, &bytes)?;
    Ok(entries)
}

pub fn load_tensors(path: &Path, entries: &[TensorEntry]) -> Result<Vec<(String, Tensor<f64>)>> {
    let bytes = read_bytes(path)?;
    entries
        .iter()
        .map(|e| {
            if e.dtype != "f64" {
                return Err(Error::Invalid(format!("tensor {} has dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset + 8 * n;
            let raw = bytes.get(e.offset..end).ok_or_else(|| {
                Error::Invalid(format!("tensor {} runs past the end of {}", e.name, path.display()))
            })?;
            Ok((e.name.clone(), Tensor::new(e.shape.clone(), le_bytes_to_f64(raw)?)?))
        })
        .collect()
}

/// Format a float for CSV output; shortest representation that round-trips.
pub fn csv_num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let tensors = vec![
            ("a".to_string(), Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 1e-300]).unwrap()),
            ("b".to_string(), Tensor::vector(vec![f64::MAX])),
        ];
        let entries = save_tensors(&p, &tensors).unwrap();
        assert_eq!(entries[1].offset, 32);
        assert_eq!(std::fs::read(&p).unwrap().len(), 40);
        assert_eq!(load_tensors(&p, &entries).unwrap(), tensors);
        assert!(!dir.path().join("t.bin.tmp").exists());
    }

    #[test]
    fn hash_is_stable() {
        let a = json_hash(&vec![1, 2, 3]).unwrap();
        assert_eq!(a, json_hash(&vec![1, 2, 3]).unwrap());
        assert_ne!(a, json_hash(&vec![1, 2, 4]).unwrap());
        assert_eq!(a.len(), 64);
    }
}
