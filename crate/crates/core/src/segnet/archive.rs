//! Single-file parameter archive.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON header
//! (config echo, free-form metadata, tensor index) and a little-endian `f32` payload.

use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"SHPSEGAR";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a parameter archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {0} (this build reads {ARCHIVE_VERSION})")]
    UnsupportedVersion(u32),
    #[error("malformed archive header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("payload holds {got} values, header promises {expected}")]
    Truncated { expected: usize, got: usize },
    #[error("missing tensor {0}")]
    Missing(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Value,
    meta: Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub config: Value,
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(config: Value, meta: Value) -> Self {
        Self {
            config,
            meta,
            tensors: Vec::new(),
        }
    }

    /// Adds tensors under `prefix/`.
    pub fn extend_prefixed(&mut self, prefix: &str, named: Vec<(String, Tensor)>) {
        self.tensors
            .extend(named.into_iter().map(|(n, t)| (format!("{prefix}/{n}"), t)));
    }

    /// Tensors stored under `prefix/`, with the prefix stripped, in stored order.
    pub fn prefixed(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let p = format!("{prefix}/");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, ArchiveError> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| ArchiveError::Missing(name.to_string()))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), ArchiveError> {
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| Entry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ArchiveError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| ArchiveError::BadMagic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != ARCHIVE_VERSION {
            return Err(ArchiveError::UnsupportedVersion(version));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() != expected * 4 {
            return Err(ArchiveError::Truncated {
                expected,
                got: payload.len() / 4,
            });
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let tensors = header
            .tensors
            .into_iter()
            .map(|e| {
                let n = e.shape.iter().product();
                let data: Vec<f32> = values.by_ref().take(n).collect();
                (e.name, Tensor::from_vec(&e.shape, data))
            })
            .collect();
        Ok(Self {
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ArchiveError> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        crate::fsutil::write_atomic(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ArchiveError> {
        let file = std::fs::File::open(path)?;
        Self::read_from(io::BufReader::new(file))
    }
}
