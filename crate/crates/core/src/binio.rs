//! Shared helpers for the section-tagged little-endian binary formats
//! (scenes and checkpoints): tagged sections with byte lengths and a
//! trailing CRC32 over the whole preceding file.

use crate::error::{Error, Result};

/// Standard CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = !0u32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            crc = (crc >> 1) ^ (0xEDB8_8320 & (!(crc & 1)).wrapping_add(1));
        }
    }
    !crc
}

pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer { buf: Vec::new() }
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
    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    pub fn section(&mut self, tag: &[u8; 8], body: impl FnOnce(&mut Writer)) {
        self.buf.extend_from_slice(tag);
        let len_at = self.buf.len();
        self.u32(0);
        body(self);
        let len = (self.buf.len() - len_at - 4) as u32;
        self.buf[len_at..len_at + 4].copy_from_slice(&len.to_le_bytes());
    }
    /// Appends the trailing checksum and returns the finished buffer.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    /// Verifies the trailing checksum up front and positions the cursor at
    /// the start; `what` names the file kind in error messages.
    pub fn open(bytes: &'a [u8], what: &'static str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, what };
        if bytes.len() < 8 {
            return Err(r.fail("file too short"));
        }
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32(&bytes[..bytes.len() - 4]);
        if stored != computed {
            r.pos = bytes.len() - 4;
            return Err(r.fail(&format!(
                "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
            )));
        }
        Ok(r)
    }
    pub fn fail(&self, detail: &str) -> Error {
        Error::Format {
            what: self.what.into(),
            detail: format!("{detail} at byte {}", self.pos),
        }
    }
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(&format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    pub fn expect_section(&mut self, tag: &[u8; 8]) -> Result<usize> {
        let got = self.take(8)?;
        if got != tag {
            self.pos -= 8;
            return Err(self.fail(&format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(got)
            )));
        }
        let len = self.u32()? as usize;
        Ok(len)
    }
    /// Asserts the cursor sits exactly at the trailing checksum.
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() - 4 {
            return Err(self.fail("trailing bytes before checksum"));
        }
        Ok(())
    }
}
