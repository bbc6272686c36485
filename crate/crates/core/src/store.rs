//! Self-describing container: a JSON header followed by little-endian `f64`
//! blocks.
//!
//! ```text
//! b"GPD1" | header length (u64 LE) | header JSON (UTF-8) | f64 LE payload
//! ```
//!
//! The header is `{"kind": ..., "meta": {...}, "blocks": [{"name", "len"}]}`
//! and the payload is the concatenation of the blocks in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"GPD1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    blocks: Vec<BlockHeader>,
}

/// In-memory form of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub blocks: Vec<(String, Vec<f64>)>,
}

impl Container {
    pub fn new<M: Serialize>(kind: &str, meta: &M) -> Result<Self> {
        let meta = serde_json::to_value(meta).map_err(|e| Error::parse("meta", e))?;
        Ok(Self {
            kind: kind.to_string(),
            meta,
            blocks: Vec::new(),
        })
    }

    pub fn with_block(mut self, name: &str, data: Vec<f64>) -> Self {
        self.blocks.push((name.to_string(), data));
        self
    }

    pub fn meta<M: DeserializeOwned>(&self) -> Result<M> {
        serde_json::from_value(self.meta.clone()).map_err(|e| Error::parse("meta", e))
    }

    pub fn block(&self, name: &str) -> Result<&[f64]> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
            .ok_or_else(|| Error::parse(format!("blocks.{name}"), "block missing"))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::parse(
                "kind",
                format!("expected `{kind}`, found `{}`", self.kind),
            ))
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|(name, d)| BlockHeader {
                    name: name.clone(),
                    len: d.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::parse("header", e))?;
        let payload: usize = self.blocks.iter().map(|(_, d)| d.len() * 8).sum();
        let mut out = Vec::with_capacity(12 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, data) in &self.blocks {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::parse("magic", "file shorter than the fixed prefix"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::parse("magic", "not a GPD1 container"));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(Error::parse(
                "header",
                format!("truncated: need {hlen} bytes, have {}", body.len()),
            ));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::parse("header", e))?;
        let mut payload = &body[hlen..];
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for b in &header.blocks {
            let need = b.len * 8;
            if payload.len() < need {
                return Err(Error::parse(
                    format!("blocks.{}", b.name),
                    format!("truncated: need {need} bytes, have {}", payload.len()),
                ));
            }
            let data = payload[..need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            payload = &payload[need..];
            blocks.push((b.name.clone(), data));
        }
        if !payload.is_empty() {
            return Err(Error::parse(
                "payload",
                format!("{} trailing bytes", payload.len()),
            ));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            blocks,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `value` as pretty JSON, creating parent directories.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse("json", e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}
