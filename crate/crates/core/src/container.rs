//! Binary file framing shared by the dataset (`LKTD`) and weights (`LKTW`) formats.
//!
//! Every file is laid out little-endian as
//!
//! ```text
//! magic[4] | version: u32 | body_len: u64 | body[body_len] | crc32(body): u32
//! ```
//!
//! The weights body is
//!
//! ```text
//! kind: u32 | metadata: str | n_tensors: u32 | tensor*
//! tensor = name: str | ndim: u32 | dims: u64[ndim] | data: f32[prod(dims)]
//! str    = len: u32 | utf8 bytes
//! ```

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"LKTW";
pub const WEIGHTS_VERSION: u32 = 1;

const FRAME_HEADER: usize = 4 + 4 + 8;

pub fn frame(magic: [u8; 4], version: u32, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER + body.len() + 4);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
    out.extend_from_slice(&crc32fast::hash(body).to_le_bytes());
    out
}

/// Validate magic, version, length and checksum; returns the body.
pub fn unframe(bytes: &[u8], magic: [u8; 4], version: u32) -> Result<&[u8]> {
    let found = bytes.get(..4).unwrap_or(bytes);
    if found != magic {
        return Err(Error::BadMagic {
            found: String::from_utf8_lossy(found).into_owned(),
            expected: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    if bytes.len() < FRAME_HEADER + 4 {
        return Err(Error::Format("file truncated inside header".into()));
    }
    let found_version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found_version != version {
        return Err(Error::VersionMismatch {
            found: found_version,
            expected: version,
        });
    }
    let body_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expected_total = (FRAME_HEADER as u64)
        .checked_add(body_len)
        .and_then(|n| n.checked_add(4));
    if expected_total != Some(bytes.len() as u64) {
        return Err(Error::Format(format!(
            "declared body length {body_len} does not match file size {}",
            bytes.len()
        )));
    }
    let body = &bytes[FRAME_HEADER..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    Ok(body)
}

/// Write through a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Default)]
pub struct ByteWriter(Vec<u8>);

impl ByteWriter {
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    pub fn into_inner(self) -> Vec<u8> {
        self.0
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format("invalid utf-8 string".into()))
    }

    /// Fails when unread bytes remain.
    pub fn finish(self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )))
        }
    }
}

/// What a weights file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ModelKind {
    MiniPfn = 1,
    LogisticRegression = 2,
    Gbdt = 3,
    PretrainCheckpoint = 4,
}

impl ModelKind {
    fn from_tag(tag: u32) -> Result<Self> {
        Ok(match tag {
            1 => ModelKind::MiniPfn,
            2 => ModelKind::LogisticRegression,
            3 => ModelKind::Gbdt,
            4 => ModelKind::PretrainCheckpoint,
            other => return Err(Error::Format(format!("unknown model kind tag {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn vector(name: impl Into<String>, data: Vec<f32>) -> Self {
        let n = data.len();
        Self::new(name, vec![n], data)
    }
}

/// Model parameters as named f32 tensors plus a JSON metadata block.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsContainer {
    pub kind: ModelKind,
    /// Canonical JSON (sorted keys, no whitespace).
    pub metadata: String,
    pub tensors: Vec<NamedTensor>,
}

impl WeightsContainer {
    pub fn new<M: Serialize>(kind: ModelKind, metadata: &M, tensors: Vec<NamedTensor>) -> Self {
        Self {
            kind,
            metadata: canonical_json(metadata),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.u32(self.kind as u32);
        w.str(&self.metadata);
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.str(&t.name);
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u64(d as u64);
            }
            for &x in &t.data {
                w.f32(x);
            }
        }
        frame(WEIGHTS_MAGIC, WEIGHTS_VERSION, &w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = unframe(bytes, WEIGHTS_MAGIC, WEIGHTS_VERSION)?;
        let mut r = ByteReader::new(body);
        let kind = ModelKind::from_tag(r.u32()?)?;
        let metadata = r.str()?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            if ndim > 8 {
                return Err(Error::Format(format!("tensor `{name}` has {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut count: u64 = 1;
            for _ in 0..ndim {
                let d = r.u64()?;
                count = count
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
                shape.push(d as usize);
            }
            if count.saturating_mul(4) > body.len() as u64 {
                return Err(Error::Format(format!("tensor `{name}` larger than file")));
            }
            let mut data = Vec::with_capacity(count as usize);
            for _ in 0..count {
                data.push(r.f32()?);
            }
            tensors.push(NamedTensor { name, shape, data });
        }
        r.finish()?;
        Ok(Self {
            kind,
            metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Format(format!(
                "expected a {kind:?} weights file, found {:?}",
                self.kind
            )))
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn metadata<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_str(&self.metadata)
            .map_err(|e| Error::Format(format!("bad metadata: {e}")))
    }
}

/// JSON with object keys sorted, so equal values serialize to equal bytes.
pub fn canonical_json<M: Serialize>(value: &M) -> String {
    // serde_json::Value keeps objects in a BTreeMap unless preserve_order is on.
    let v = serde_json::to_value(value).expect("metadata serializes");
    serde_json::to_string(&v).expect("value serializes")
}
