//! The shared on-disk container:
//!
//! ```text
//! "CORA" | version: u32 LE | manifest_len: u64 LE | manifest (JSON) | blob | SHA-256(everything before)
//! ```
//!
//! The manifest carries `format_version` and `blob_len`; tensors live in the
//! blob and are referenced from the manifest as `{offset, len}` byte ranges.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, FormatError, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"CORA";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const DIGEST_LEN: usize = 32;

/// Byte range of one tensor inside the blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub offset: usize,
    pub len: usize,
}

/// Append-only blob builder used when writing.
#[derive(Debug, Default)]
pub(crate) struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push_bytes(&mut self, raw: &[u8]) -> BlobRef {
        let r = BlobRef { offset: self.bytes.len(), len: raw.len() };
        self.bytes.extend_from_slice(raw);
        r
    }

    pub fn push_f32<T: Scalar>(&mut self, values: &[T]) -> BlobRef {
        let raw: Vec<u8> = values.iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect();
        self.push_bytes(&raw)
    }

    pub fn push_u32(&mut self, values: &[u32]) -> BlobRef {
        let raw: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.push_bytes(&raw)
    }

    pub fn push_i8(&mut self, values: &[i8]) -> BlobRef {
        let raw: Vec<u8> = values.iter().map(|&v| v as u8).collect();
        self.push_bytes(&raw)
    }
}

/// A decoded container: the manifest object and the verified blob.
#[derive(Debug)]
pub(crate) struct Container {
    pub manifest: Map<String, Value>,
    pub blob: Vec<u8>,
    claimed: Vec<(usize, usize)>,
}

pub(crate) fn manifest_error(msg: impl Into<String>) -> Error {
    FormatError::Manifest(msg.into()).into()
}

/// Serializes `manifest` (keys sorted) and `blob` into a complete file image.
pub(crate) fn encode(mut manifest: Map<String, Value>, blob: BlobWriter) -> Vec<u8> {
    manifest.insert("format_version".into(), FORMAT_VERSION.into());
    manifest.insert("blob_len".into(), blob.bytes.len().into());
    // `Map` is ordered by key, so the manifest text is canonical.
    let text = serde_json::to_vec(&Value::Object(manifest)).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + text.len() + blob.bytes.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&blob.bytes);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Validates and splits a file image. Checks run in a fixed order so every
/// failure maps to one distinct error: magic, version, truncation,
/// checksum, then manifest structure.
pub(crate) fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < MAGIC.len() {
        return Err(FormatError::Truncated(format!("{} bytes, shorter than the magic", bytes.len())).into());
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated("incomplete header".into()).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch { found: version, supported: FORMAT_VERSION }.into());
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let manifest_end = usize::try_from(manifest_len)
        .ok()
        .and_then(|m| m.checked_add(HEADER_LEN))
        .filter(|&end| end.checked_add(DIGEST_LEN).is_some_and(|total| total <= bytes.len()))
        .ok_or_else(|| FormatError::Truncated(format!("manifest of {manifest_len} bytes does not fit the file")))?;

    // The blob length comes from the manifest; if the manifest is intact we
    // can tell a short file from a corrupted one.
    let parsed: Option<Map<String, Value>> = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end]).ok();
    let blob_len = parsed.as_ref().and_then(|m| m.get("blob_len")).and_then(Value::as_u64);
    if let Some(blob_len) = blob_len {
        let expected = (manifest_end as u64).saturating_add(blob_len).saturating_add(DIGEST_LEN as u64);
        if (bytes.len() as u64) < expected {
            return Err(FormatError::Truncated(format!("{} of {expected} bytes present", bytes.len())).into());
        }
    }

    let body_end = bytes.len() - DIGEST_LEN;
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(FormatError::Integrity.into());
    }

    let manifest = parsed.ok_or_else(|| manifest_error("manifest is not a JSON object"))?;
    let blob_len = blob_len.ok_or_else(|| manifest_error("missing blob_len"))?;
    if (body_end - manifest_end) as u64 != blob_len {
        return Err(manifest_error(format!("blob_len {blob_len} disagrees with the file size")));
    }
    match manifest.get("format_version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(version) => {}
        other => return Err(manifest_error(format!("format_version {other:?} disagrees with the header"))),
    }
    Ok(Container { manifest, blob: bytes[manifest_end..body_end].to_vec(), claimed: Vec::new() })
}

pub(crate) fn read_file(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn write_file(path: &Path, manifest: Map<String, Value>, blob: BlobWriter) -> Result<()> {
    std::fs::write(path, encode(manifest, blob)).map_err(|e| Error::io(path, e))
}

/// Typed access to manifest fields with uniform error messages.
pub(crate) trait Fields {
    fn field(&self, key: &str) -> Result<&Value>;

    fn parse<D: serde::de::DeserializeOwned>(&self, key: &str) -> Result<D> {
        D::deserialize(self.field(key)?).map_err(|e| manifest_error(format!("field {key:?}: {e}")))
    }

    fn parse_opt<D: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<D>> {
        match self.field(key) {
            Ok(Value::Null) | Err(_) => Ok(None),
            Ok(_) => self.parse(key).map(Some),
        }
    }

    fn str_field(&self, key: &str) -> Result<&str> {
        self.field(key)?.as_str().ok_or_else(|| manifest_error(format!("field {key:?} must be a string")))
    }
}

impl Fields for Map<String, Value> {
    fn field(&self, key: &str) -> Result<&Value> {
        self.get(key).ok_or_else(|| manifest_error(format!("missing field {key:?}")))
    }
}

impl Container {
    pub fn expect_kind(&self, expected: &str) -> Result<()> {
        let found = self.manifest.str_field("kind")?;
        if found != expected {
            return Err(FormatError::WrongKind { expected: expected.into(), found: found.into() }.into());
        }
        Ok(())
    }

    /// Bytes of `r`, which must hold exactly `count` elements of `width`
    /// bytes and must not overlap any range read before.
    fn slice(&mut self, r: BlobRef, count: usize, width: usize) -> Result<&[u8]> {
        let want = count.checked_mul(width).ok_or_else(|| manifest_error("tensor size overflows"))?;
        if r.len != want {
            return Err(manifest_error(format!("tensor of {count} elements declared with {} bytes", r.len)));
        }
        let end = r.offset.checked_add(r.len).filter(|&e| e <= self.blob.len()).ok_or_else(|| {
            manifest_error(format!("range {}+{} exceeds the {}-byte blob", r.offset, r.len, self.blob.len()))
        })?;
        if r.len > 0 {
            if self.claimed.iter().any(|&(s, e)| r.offset < e && s < end) {
                return Err(manifest_error(format!("range {}+{} overlaps another tensor", r.offset, r.len)));
            }
            self.claimed.push((r.offset, end));
        }
        Ok(&self.blob[r.offset..end])
    }

    pub fn f32_tensor<T: Scalar>(&mut self, r: BlobRef, count: usize) -> Result<Vec<T>> {
        let raw = self.slice(r, count, 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| T::of(f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")))))
            .collect())
    }

    pub fn u32_tensor(&mut self, r: BlobRef, count: usize) -> Result<Vec<u32>> {
        let raw = self.slice(r, count, 4)?;
        Ok(raw.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn i8_tensor(&mut self, r: BlobRef, count: usize) -> Result<Vec<i8>> {
        Ok(self.slice(r, count, 1)?.iter().map(|&b| b as i8).collect())
    }
}
