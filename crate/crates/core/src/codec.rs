//! Little-endian binary encoding shared by the checkpoint (`GFIT`),
//! embedding-store (`GEMB`) and dataset (`GDAT`) formats.

use crate::error::{GrafitError, Result};

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn u32s(&mut self, vs: &[u32]) {
        for &v in vs {
            self.u32(v);
        }
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn format_error(&self, msg: impl Into<String>) -> GrafitError {
        GrafitError::Format { offset: self.offset(), msg: msg.into() }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        match end {
            Some(end) => {
                let s = &self.data[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(GrafitError::Truncated { offset: self.data.len() as u64 }),
        }
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.take(4)?;
        if got != magic {
            return Err(GrafitError::Format {
                offset: at,
                msg: format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)),
            });
        }
        Ok(())
    }

    pub fn expect_version(&mut self, version: u32) -> Result<()> {
        let at = self.offset();
        let got = self.u32()?;
        if got != version {
            return Err(GrafitError::Format { offset: at, msg: format!("unsupported version {got}, expected {version}") });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Reads `n` values, failing on truncation before allocating.
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.format_error("length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.format_error("length overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn finish(&self) -> Result<()> {
        if !self.is_at_end() {
            return Err(self.format_error("trailing bytes"));
        }
        Ok(())
    }
}
