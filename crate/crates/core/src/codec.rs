//! Little-endian byte helpers shared by the scene and checkpoint formats.

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        if end > self.data.len() {
            return Err(Error::Truncated(what));
        }
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn str(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("{what}: invalid utf-8")))
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
}

/// Wraps `body` as `magic | version | body length | body | crc32`. The CRC
/// covers every byte before the footer.
pub(crate) fn write_frame(magic: &[u8; 8], version: u32, body: &[u8]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(magic);
    w.u32(version);
    w.u64(body.len() as u64);
    w.bytes(body);
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

const HEADER_LEN: usize = 8 + 4 + 8;

/// Checks the magic tag, version, declared length, and CRC32 footer of a
/// framed file and returns a reader over the body.
pub(crate) fn open_frame<'a>(
    data: &'a [u8],
    magic: &[u8; 8],
    what: &'static str,
    supported: u32,
) -> Result<ByteReader<'a>> {
    let mut r = ByteReader::new(data);
    let tag = r.take(8, "magic tag")?;
    if tag != magic {
        return Err(Error::BadMagic { expected: what });
    }
    let version = r.u32("version")?;
    if version != supported {
        return Err(Error::Version {
            what,
            found: version,
            supported,
        });
    }
    let body_len = r.u64("body length")? as usize;
    let expected = HEADER_LEN
        .checked_add(body_len)
        .and_then(|n| n.checked_add(4))
        .ok_or(Error::Format("body length overflows".into()))?;
    if data.len() < expected {
        return Err(Error::Truncated(what));
    }
    if data.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after {what} footer",
            data.len() - expected
        )));
    }
    let body_end = HEADER_LEN + body_len;
    let stored = u32::from_le_bytes(data[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&data[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    Ok(ByteReader::new(&data[HEADER_LEN..body_end]))
}
