//! Small shared helpers: seeded RNG streams, hashing, and a framed binary
//! codec used by every persisted model.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Deterministic RNG for `(seed, stream)`. Different streams never share output.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Little-endian writer for the native binary formats. Every file starts
/// with an 8-byte magic and a `u32` format version.
pub(crate) struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    pub fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut w = BinWriter { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
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
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct BinReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> BinReader<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path, magic: &[u8; 8], version: u32) -> Result<Self> {
        if buf.len() < 12 || &buf[..8] != magic {
            return Err(Error::format(path, "bad magic"));
        }
        let mut r = BinReader { buf, pos: 8, path };
        let found = r.u32()?;
        if found != version {
            return Err(Error::format(
                path,
                format!("format version {found}, expected {version}"),
            ));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(Error::format(self.path, "length field out of range"));
        }
        Ok(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(self.path, "invalid utf-8"))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}
