//! Little-endian binary encoding shared by every persisted artifact.
//!
//! Decoding never trusts a length field: every count is checked against the
//! bytes remaining before anything is allocated.

use sha2::{Digest, Sha256};

use crate::error::{Error, FileKind, Result};

#[derive(Default)]
pub struct Writer {
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

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.f64(*v);
        }
    }

    pub fn u32s(&mut self, vs: &[u32]) {
        for v in vs {
            self.u32(*v);
        }
    }

    /// Length-prefixed (u32) UTF-8 string.
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    kind: FileKind,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(kind: FileKind, buf: &'a [u8]) -> Self {
        Self { kind, buf, pos: 0 }
    }

    pub fn kind(&self) -> FileKind {
        self.kind
    }

    pub fn malformed(&self, msg: impl Into<String>) -> Error {
        Error::Malformed {
            kind: self.kind,
            msg: msg.into(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.malformed(format!(
                "truncated at byte {} (wanted {n}, have {})",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self
            .take(8)
            .map_err(|_| Error::BadMagic { kind: self.kind })?;
        if got != expected {
            return Err(Error::BadMagic { kind: self.kind });
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<()> {
        let v = self.u32()?;
        if v != supported {
            return Err(Error::UnsupportedVersion {
                kind: self.kind,
                version: v,
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// A u64 count that must fit in memory-sized arithmetic.
    pub fn count(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.malformed(format!("count {v} overflows")))
    }

    pub fn u32_count(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    /// Exactly `n` f64 values; fails before allocating if the buffer is short.
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.malformed("f64 array length overflows"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.malformed("u32 array length overflows"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32_count()?;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.malformed("invalid UTF-8 string"))
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.malformed(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

/// Checked product of dimensions.
pub fn checked_len(kind: FileKind, dims: &[usize]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d).ok_or_else(|| Error::Malformed {
            kind,
            msg: format!("dimensions {dims:?} overflow"),
        })
    })
}

/// Stable 64-bit content hash: the first eight bytes of SHA-256.
pub fn content_hash(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn tokens_bytes(tokens: &[u32]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32s(tokens);
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reader_rejects_oversized_counts_without_allocating() {
        let mut w = Writer::new();
        w.u64(u64::MAX / 4);
        let bytes = w.finish();
        let mut r = Reader::new(FileKind::Corpus, &bytes);
        let n = r.count().unwrap();
        assert!(matches!(r.f64s(n), Err(Error::Malformed { .. })));
    }

    #[test]
    fn hash_separates_concatenations() {
        assert_ne!(content_hash(&[b"ab", b"c"]), content_hash(&[b"a", b"bc"]));
        assert_eq!(content_hash(&[b"xyz"]), content_hash(&[b"xyz"]));
    }
}
