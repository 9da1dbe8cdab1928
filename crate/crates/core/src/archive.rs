//! Single-file tensor archive: one line of JSON text (the manifest) followed
//! by the raw tensors as little-endian `f32`, concatenated in manifest order.
//!
//! ```text
//! {"format":"xsense-archive","version":1,"meta":{...},"tensors":[{"name":"a","shape":[2,3],"offset":0}, ...]}\n
//! <f32 LE * sum(prod(shape))>
//! ```
//!
//! `offset` counts `f32` elements from the start of the payload.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const FORMAT: &str = "xsense-archive";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: malformed archive: {msg}")]
    Format { path: String, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

/// A named `f32` tensor held by an archive.
#[derive(Clone, Debug, PartialEq)]
pub struct Stored {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub meta: serde_json::Value,
    pub tensors: Vec<Stored>,
}

impl Archive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Stored { name: name.into(), shape, data });
    }

    pub fn get(&self, name: &str) -> Option<&Stored> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        let io_err = |source| ArchiveError::Io { path: path.display().to_string(), source };
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let e = Entry { name: t.name.clone(), shape: t.shape.clone(), offset };
                offset += t.data.len();
                e
            })
            .collect();
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            meta: self.meta.clone(),
            tensors,
        };
        let tmp = path.with_extension("partial");
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io_err)?);
            serde_json::to_writer(&mut w, &manifest).map_err(|e| io_err(e.into()))?;
            w.write_all(b"\n").map_err(io_err)?;
            for t in &self.tensors {
                for v in &t.data {
                    w.write_all(&v.to_le_bytes()).map_err(io_err)?;
                }
            }
            w.flush().map_err(io_err)?;
        }
        fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        let p = path.display().to_string();
        let io_err = |source| ArchiveError::Io { path: p.clone(), source };
        let bad = |msg: String| ArchiveError::Format { path: p.clone(), msg };
        let mut r = BufReader::new(File::open(path).map_err(io_err)?);
        let mut line = String::new();
        r.read_line(&mut line).map_err(io_err)?;
        let manifest: Manifest = serde_json::from_str(line.trim_end()).map_err(|e| bad(e.to_string()))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(bad(format!("unsupported format {} v{}", manifest.format, manifest.version)));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(io_err)?;
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values".into()));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| bad(format!("tensor {} runs past the payload", e.name)))?
                .to_vec();
            tensors.push(Stored { name: e.name, shape: e.shape, data });
        }
        Ok(Self { meta: manifest.meta, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let mut a = Archive::new(serde_json::json!({"epoch": 3, "note": "x"}));
        a.push("w", vec![2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-12, 7.25, -1e30]);
        a.push("b", vec![1], vec![0.1]);
        a.save(&path).unwrap();
        let b = Archive::load(&path).unwrap();
        assert_eq!(a.meta, b.meta);
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.shape, y.shape);
            let xb: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&c| c == b'\n').unwrap();
        assert_eq!(bytes.len() - nl - 1, 7 * 4);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        let mut a = Archive::new(serde_json::Value::Null);
        a.push("w", vec![4], vec![1.0; 4]);
        a.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Archive::load(&path), Err(ArchiveError::Format { .. })));
    }
}
