//! The `ASPN` checkpoint container.
//!
//! Layout: the four magic bytes, a little-endian `u32` format version, a
//! little-endian `u64` header length, the UTF-8 JSON header and the raw
//! little-endian payload. Optimizer moments are not stored.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{ParamEntry, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ASPN";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Byte length in the payload.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub element_bytes: usize,
    pub iteration: usize,
    pub config: RunConfig,
    pub params: Vec<ParamRecord>,
}

impl CheckpointHeader {
    pub fn payload_len(&self) -> usize {
        self.params.iter().map(|p| p.length).sum()
    }

    fn check(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Format(msg));
        if self.format_version != FORMAT_VERSION {
            return fail(format!("header declares format version {}", self.format_version));
        }
        let width = match self.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return fail(format!("unsupported element type `{other}`")),
        };
        if self.element_bytes != width {
            return fail(format!("element width {} does not match {}", self.element_bytes, self.dtype));
        }
        let mut names = BTreeSet::new();
        let mut cursor = 0;
        for p in &self.params {
            if !names.insert(p.name.as_str()) {
                return fail(format!("duplicate parameter `{}`", p.name));
            }
            let count: usize = p.shape.iter().product();
            if p.length != count * width {
                return fail(format!("`{}` declares {} bytes for shape {:?}", p.name, p.length, p.shape));
            }
            if p.offset != cursor {
                return fail(format!(
                    "`{}` starts at byte {} but the previous record ends at {cursor}",
                    p.name, p.offset
                ));
            }
            cursor += p.length;
        }
        Ok(())
    }
}

/// Serializes every entry of `store` in name order.
pub fn encode<E: Scalar>(store: &ParamStore<E>, config: &RunConfig, iteration: usize) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut params = Vec::with_capacity(store.len());
    for (name, entry) in store.iter() {
        let offset = payload.len();
        for &v in entry.value.data() {
            v.write_le(&mut payload);
        }
        params.push(ParamRecord {
            name: name.to_string(),
            kind: entry.kind,
            shape: entry.value.shape().to_vec(),
            offset,
            length: payload.len() - offset,
        });
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        dtype: E::DTYPE.to_string(),
        element_bytes: E::BYTES,
        iteration,
        config: config.clone(),
        params,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses and validates the header; returns it with the payload slice.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an ASPN checkpoint (bad magic)".into()));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(Error::Format("checkpoint truncated inside the fixed prefix".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(PREFIX_LEN))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format("checkpoint truncated inside the header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[PREFIX_LEN..end])
        .map_err(|e| Error::Format(format!("malformed checkpoint header: {e}")))?;
    header.check()?;
    let payload = &bytes[end..];
    let want = header.payload_len();
    if payload.len() < want {
        return Err(Error::Format(format!(
            "payload shorter than header declares ({} of {want} bytes)",
            payload.len()
        )));
    }
    if payload.len() > want {
        return Err(Error::Format(format!(
            "payload longer than header declares ({} of {want} bytes)",
            payload.len()
        )));
    }
    Ok((header, payload))
}

/// Rebuilds the parameter store. The element type must match the stored one.
pub fn decode<E: Scalar>(bytes: &[u8]) -> Result<(CheckpointHeader, ParamStore<E>)> {
    let (header, payload) = decode_header(bytes)?;
    if header.dtype != E::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint stores {} values, expected {}",
            header.dtype,
            E::DTYPE
        )));
    }
    let mut store = ParamStore::new();
    for p in &header.params {
        let data = payload[p.offset..p.offset + p.length]
            .chunks_exact(E::BYTES)
            .map(E::read_le)
            .collect();
        let entry = ParamEntry {
            value: Tensor::new(p.shape.clone(), data)?,
            kind: p.kind,
            moments: None,
            step: 0,
        };
        store.insert_entry(p.name.clone(), entry)?;
    }
    Ok((header, store))
}

pub fn save<E: Scalar>(path: &Path, store: &ParamStore<E>, config: &RunConfig, iteration: usize) -> Result<()> {
    std::fs::write(path, encode(store, config, iteration)?)?;
    Ok(())
}

pub fn load<E: Scalar>(path: &Path) -> Result<(CheckpointHeader, ParamStore<E>)> {
    decode(&std::fs::read(path)?)
}
