//! Binary container shared by corpora and trained networks.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "PDIFFCNT"
//! version  u32
//! section  4 bytes  e.g. "CORP", "AENC", "DENO"
//! mlen     u64      manifest length
//! manifest mlen bytes of canonical JSON (sorted keys, compact)
//! rows     u64
//! cols     u64
//! matrix   rows * cols f32, row-major
//! checksum 32 bytes SHA-256 of everything above
//! ```

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"PDIFFCNT";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

pub type SectionTag = [u8; 4];
pub const CORPUS_TAG: SectionTag = *b"CORP";
pub const AUTOENCODER_TAG: SectionTag = *b"AENC";
pub const DENOISER_TAG: SectionTag = *b"DENO";
pub const MODEL_TAG: SectionTag = *b"MODL";
pub const GENERATED_TAG: SectionTag = *b"GENR";

/// Serialises `value` as compact JSON with object keys sorted.
pub fn canonical_json<S: Serialize>(value: &S) -> Result<Vec<u8>> {
    // serde_json's Value map is ordered by key
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_vec(&v)?)
}

/// Pretty variant of [`canonical_json`] for human-facing reports.
pub fn canonical_json_pretty<S: Serialize>(value: &S) -> Result<Vec<u8>> {
    let v = serde_json::to_value(value)?;
    let mut out = serde_json::to_vec_pretty(&v)?;
    out.push(b'\n');
    Ok(out)
}

/// Decoded container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container<M> {
    pub manifest: M,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

pub fn encode<M: Serialize>(tag: SectionTag, manifest: &M, rows: usize, cols: usize, data: &[f32]) -> Result<Vec<u8>> {
    if rows * cols != data.len() {
        return Err(Error::Format(format!("{rows}x{cols} matrix with {} values", data.len())));
    }
    let json = canonical_json(manifest)?;
    let mut buf = Vec::with_capacity(40 + json.len() + data.len() * 4 + CHECKSUM_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&tag);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of payload".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format(format!("length {v} overflows")))
    }
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8], expected_tag: SectionTag) -> Result<Container<M>> {
    if bytes.len() < CHECKSUM_LEN {
        return Err(Error::Checksum);
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::Checksum);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let tag = r.take(4)?;
    if tag != expected_tag {
        return Err(Error::Format(format!(
            "section `{}` where `{}` was expected",
            String::from_utf8_lossy(tag),
            String::from_utf8_lossy(&expected_tag)
        )));
    }
    let mlen = r.u64()?;
    let manifest: M = serde_json::from_slice(r.take(mlen)?)?;
    let rows = r.u64()?;
    let cols = r.u64()?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
    let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("matrix size overflows".into()))?)?;
    if r.pos != body.len() {
        return Err(Error::Format(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Container {
        manifest,
        rows,
        cols,
        data,
    })
}

pub fn write_file<M: Serialize>(
    path: &Path,
    tag: SectionTag,
    manifest: &M,
    rows: usize,
    cols: usize,
    data: &[f32],
) -> Result<()> {
    let bytes = encode(tag, manifest, rows, cols, data)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_file<M: DeserializeOwned>(path: &Path, tag: SectionTag) -> Result<Container<M>> {
    decode(&std::fs::read(path)?, tag)
}
