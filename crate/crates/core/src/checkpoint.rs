//! Versioned binary container shared by field and denoiser checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "AVCK" | format version u32 | float width u32 (4 or 8)
//! | header length u32 | header (UTF-8 JSON) | parameter count u64 | parameters
//! ```
//!
//! The header records the kind and every shape needed to rebuild the object;
//! loaders compare it against the expected configuration before touching the
//! parameter payload.

use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::Precision;

pub const MAGIC: [u8; 4] = *b"AVCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header<T> {
    pub kind: String,
    pub config: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub precision: Precision,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new<T: Serialize>(kind: &str, config: &T, params: &[f64], precision: Precision) -> Result<Self> {
        let header = serde_json::to_value(Header {
            kind: kind.to_string(),
            config,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            header,
            precision,
            params: params.to_vec(),
        })
    }

    pub fn kind(&self) -> &str {
        self.header.get("kind").and_then(|k| k.as_str()).unwrap_or("")
    }

    /// Decodes the header config, failing if the kind differs.
    pub fn config<T: DeserializeOwned>(&self, kind: &str) -> Result<T> {
        if self.kind() != kind {
            return Err(Error::Format(format!(
                "checkpoint holds a {:?}, expected {kind:?}",
                self.kind()
            )));
        }
        let header: Header<T> =
            serde_json::from_value(self.header.clone()).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        Ok(header.config)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("json value serializes");
        let width: u32 = match self.precision {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        let mut out = Vec::with_capacity(24 + header.len() + self.params.len() * width as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&width.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for &p in &self.params {
            match self.precision {
                Precision::F32 => out.extend_from_slice(&(p as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&p.to_le_bytes()),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let precision = match u32_at(8) {
            4 => Precision::F32,
            8 => Precision::F64,
            w => return Err(bad(&format!("unsupported float width {w}"))),
        };
        let hlen = u32_at(12) as usize;
        let body = 16 + hlen;
        if bytes.len() < body + 8 {
            return Err(bad("truncated header"));
        }
        let header: serde_json::Value =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(&format!("header json: {e}")))?;
        let n = u64::from_le_bytes(bytes[body..body + 8].try_into().unwrap()) as usize;
        let width = if precision == Precision::F32 { 4 } else { 8 };
        let payload = &bytes[body + 8..];
        if payload.len() != n * width {
            return Err(bad(&format!(
                "expected {} parameter bytes, found {}",
                n * width,
                payload.len()
            )));
        }
        let params = payload
            .chunks_exact(width)
            .map(|c| match precision {
                Precision::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                Precision::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect();
        Ok(Self {
            header,
            precision,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn sha256(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a parameter vector at full precision; used for immutability checks.
pub fn params_hash(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}
