//! Little-endian binary framing shared by the model and pair files.
//!
//! Every file ends with a CRC-64/XZ checksum of all preceding bytes.

use crc::{Crc, CRC_64_XZ};
use thiserror::Error;

pub const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn crc64(bytes: &[u8]) -> u64 {
    CRC64.checksum(bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("unsupported version {0}")]
    VersionUnsupported(u32),
    #[error("file truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("file has {extra} bytes beyond the declared dimensions")]
    DimensionMismatch { extra: u64 },
    #[error("malformed content: {0}")]
    Malformed(String),
}

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn with_capacity(n: usize) -> Self {
        Self { buf: Vec::with_capacity(n) }
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.f32(*v);
        }
    }
    /// Appends the checksum trailer and returns the file bytes.
    pub fn finish(mut self) -> Vec<u8> {
        let c = crc64(&self.buf);
        self.u64(c);
        self.buf
    }
}

/// Cursor over a checksum-verified body.
pub(crate) struct Reader<'a> {
    body: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(body: &'a [u8]) -> Self {
        Self { body, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.pos + n > self.body.len() {
            return Err(FormatError::TruncatedFile {
                expected: (self.pos + n + 8) as u64,
                found: (self.body.len() + 8) as u64,
            });
        }
        let s = &self.body[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f32s_into(&mut self, out: &mut Vec<f32>, n: usize) -> Result<(), FormatError> {
        let raw = self.take(n * 4)?;
        out.extend(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())));
        Ok(())
    }
    pub fn remaining(&self) -> usize {
        self.body.len() - self.pos
    }
}

/// Checks magic, then splits off and verifies the checksum trailer once the
/// expected total length is known.
pub(crate) fn check_magic(bytes: &[u8], magic: &[u8; 4]) -> Result<(), FormatError> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(FormatError::BadMagic { expected: *magic, found: bytes[..bytes.len().min(4)].to_vec() });
    }
    Ok(())
}

pub(crate) fn check_length(bytes: &[u8], expected: u64) -> Result<(), FormatError> {
    let found = bytes.len() as u64;
    if found < expected {
        return Err(FormatError::TruncatedFile { expected, found });
    }
    if found > expected {
        return Err(FormatError::DimensionMismatch { extra: found - expected });
    }
    Ok(())
}

/// Verifies the trailer and returns the body it covers.
pub(crate) fn verify_trailer(bytes: &[u8]) -> Result<&[u8], FormatError> {
    if bytes.len() < 8 {
        return Err(FormatError::TruncatedFile { expected: 8, found: bytes.len() as u64 });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = crc64(body);
    if stored != computed {
        return Err(FormatError::ChecksumMismatch { stored, computed });
    }
    Ok(body)
}
