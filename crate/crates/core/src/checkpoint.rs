//! Checkpoint files: a short text preamble, a JSON header, then raw
//! little-endian `f32` tensors.
//!
//! ```text
//! SIMCLIP-CKPT
//! format_version = 1
//! header_bytes = <n>
//! <n bytes of JSON header>
//! <tensor blob>
//! ```
//!
//! The header records every tensor's name, shape and byte range plus a
//! SHA-256 digest over the header (with the digest field blank) and the blob.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{ArchSpec, Param, VisionEncoder};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "SIMCLIP-CKPT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub arch: ArchSpec,
    pub seed: u64,
    pub config_digest: String,
    pub tensors: Vec<TensorEntry>,
    pub blob_bytes: usize,
    /// Free-form metadata (training state, notes).
    #[serde(default)]
    pub extra: serde_json::Value,
    #[serde(default)]
    pub digest: String,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Param<f32>>,
}

fn digest(header: &Header, blob: &[u8]) -> Result<String> {
    let mut h = header.clone();
    h.digest = String::new();
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&h)?);
    hasher.update(blob);
    Ok(hex::encode(hasher.finalize()))
}

/// Serialize tensors plus metadata to bytes.
pub fn encode(kind: &str, arch: &ArchSpec, seed: u64, config_digest: &str, tensors: &[Param<f32>], extra: serde_json::Value) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        let offset = blob.len();
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let mut header = Header {
        kind: kind.to_string(),
        arch: arch.clone(),
        seed,
        config_digest: config_digest.to_string(),
        tensors: entries,
        blob_bytes: blob.len(),
        extra,
        digest: String::new(),
    };
    header.digest = digest(&header, &blob)?;
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(64 + header_json.len() + blob.len());
    write!(
        out,
        "{MAGIC}\nformat_version = {FORMAT_VERSION}\nheader_bytes = {}\n",
        header_json.len()
    )?;
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::CheckpointTruncated("preamble ends early".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::CheckpointFormat("preamble is not UTF-8".into()))
}

fn key_value<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.trim_start().strip_prefix('='))
        .map(str::trim)
        .ok_or_else(|| Error::CheckpointFormat(format!("expected `{key} = ...`, found {line:?}")))
}

/// Parse and verify checkpoint bytes.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut pos = 0;
    if take_line(bytes, &mut pos)? != MAGIC {
        return Err(Error::CheckpointFormat("missing SIMCLIP-CKPT magic".into()));
    }
    let version: u32 = key_value(take_line(bytes, &mut pos)?, "format_version")?
        .parse()
        .map_err(|_| Error::CheckpointFormat("format_version is not an integer".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len: usize = key_value(take_line(bytes, &mut pos)?, "header_bytes")?
        .parse()
        .map_err(|_| Error::CheckpointFormat("header_bytes is not an integer".into()))?;
    if bytes.len() < pos + header_len {
        return Err(Error::CheckpointTruncated(format!(
            "header needs {header_len} bytes, {} available",
            bytes.len() - pos
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[pos..pos + header_len])
        .map_err(|e| Error::CheckpointFormat(format!("header: {e}")))?;
    pos += header_len;
    let blob = &bytes[pos..];
    if blob.len() < header.blob_bytes {
        return Err(Error::CheckpointTruncated(format!(
            "tensor blob needs {} bytes, {} available",
            header.blob_bytes,
            blob.len()
        )));
    }
    if blob.len() > header.blob_bytes {
        return Err(Error::CheckpointFormat("trailing bytes after tensor blob".into()));
    }
    let actual = digest(&header, blob)?;
    if actual != header.digest {
        return Err(Error::CheckpointDigest {
            expected: header.digest.clone(),
            actual,
        });
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let numel: usize = e.shape.iter().product();
        if e.bytes != numel * 4 || e.offset + e.bytes > blob.len() {
            return Err(Error::CheckpointFormat(format!("tensor {} has an inconsistent byte range", e.name)));
        }
        let data = blob[e.offset..e.offset + e.bytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(Param {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data,
        });
    }
    Ok(Checkpoint { header, tensors })
}

/// Write bytes through a temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_checkpoint(encoder: &VisionEncoder<f32>, path: &Path, config_digest: &str) -> Result<()> {
    let bytes = encode("encoder", encoder.arch(), encoder.seed(), config_digest, encoder.params(), serde_json::Value::Null)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<VisionEncoder<f32>> {
    let ckpt = decode(&std::fs::read(path)?)?;
    VisionEncoder::from_params(ckpt.header.arch, ckpt.header.seed, ckpt.tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::ImageShape;

    fn encoder() -> VisionEncoder<f32> {
        VisionEncoder::init(ArchSpec::small(ImageShape::new(3, 8, 8), 32), 21).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let enc = encoder();
        save_checkpoint(&enc, &path, "abc").unwrap();
        let back = load_checkpoint(&path).unwrap();
        for (a, b) in enc.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back, enc);
    }

    #[test]
    fn corrupted_tensor_byte_fails_digest() {
        let enc = encoder();
        let mut bytes = encode("encoder", enc.arch(), enc.seed(), "", enc.params(), serde_json::Value::Null).unwrap();
        let last = bytes.len() - 7;
        bytes[last] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::CheckpointDigest { .. })));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let enc = encoder();
        let bytes = encode("encoder", enc.arch(), enc.seed(), "", enc.params(), serde_json::Value::Null).unwrap();
        let text = String::from_utf8_lossy(&bytes[..40]).replace("format_version = 1", "format_version = 9");
        let mut patched = text.into_bytes();
        patched.extend_from_slice(&bytes[40..]);
        assert!(matches!(decode(&patched), Err(Error::CheckpointVersion { found: 9, expected: 1 })));
    }

    #[test]
    fn truncated_file_is_reported() {
        let enc = encoder();
        let bytes = encode("encoder", enc.arch(), enc.seed(), "", enc.params(), serde_json::Value::Null).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 10]), Err(Error::CheckpointTruncated(_))));
        assert!(matches!(decode(&bytes[..30]), Err(Error::CheckpointTruncated(_))));
    }
}
