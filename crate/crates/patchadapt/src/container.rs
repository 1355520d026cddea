//! One binary container for everything on disk: a single line of UTF-8 JSON,
//! a newline, then the payload as little-endian 32-bit reals.
//!
//! Clip arrays, precomputed feature files, and checkpoints all share this
//! layout — one parser, bit-exact round trips. The container itself is dumb:
//! callers validate payload length against whatever their header declares.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Header of a precomputed feature file: row-major T x D payload.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FeatHeader {
    pub clip_id: String,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "D")]
    pub d: usize,
}

/// Header of a raw clip array (rgb/flow/audio): explicit shape and dtype.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ArrayHeader {
    pub clip_id: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

pub fn f32s_to_le_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn le_bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::data(format!(
            "payload of {} bytes is not a whole number of 32-bit values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Write `header` as one JSON line followed by the f32 payload.
/// Returns the byte offset at which the payload starts.
pub fn write_with_header<H: Serialize>(path: &Path, header: &H, data: &[f32]) -> Result<u64> {
    let mut line = serde_json::to_string(header)
        .map_err(|e| Error::data(format!("cannot serialize header for {}: {e}", path.display())))?;
    debug_assert!(!line.contains('\n'), "header must be a single line");
    line.push('\n');
    let mut f = fs::File::create(path)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(line.as_bytes())
        .and_then(|_| f.write_all(&f32s_to_le_bytes(data)))
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(line.len() as u64)
}

/// Read a container written by [`write_with_header`].
pub fn read_with_header<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f32>)> {
    let mut f = fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::data(format!("{}: missing header line", path.display())))?;
    let header_str = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::data(format!("{}: header is not UTF-8", path.display())))?;
    let header: H = serde_json::from_str(header_str)
        .map_err(|e| Error::data(format!("{}: bad header: {e}", path.display())))?;
    let payload = le_bytes_to_f32s(&bytes[nl + 1..])
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    Ok((header, payload))
}

/// Validate that a payload holds exactly `expect` values, in caller's terms.
pub fn expect_len(path: &Path, payload: &[f32], expect: usize, what: &str) -> Result<()> {
    if payload.len() != expect {
        return Err(Error::data(format!(
            "{}: {what} declares {expect} values but payload has {}",
            path.display(),
            payload.len()
        )));
    }
    Ok(())
}
