//! Binary container family shared by datasets, POD bases, and models.
//!
//! Layout: an 8-byte magic string, a little-endian `u32` version, a `u8`
//! kind tag, a kind-specific fixed header, then the payload as little-endian
//! 64-bit floats. Reloading is bit-exact and language-portable.

use crate::error::{Error, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"L96STOCH";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Dataset = 1,
    Basis = 2,
    Model = 3,
}

impl Kind {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Kind::Dataset),
            2 => Ok(Kind::Basis),
            3 => Ok(Kind::Model),
            other => Err(Error::Container(format!("unknown container kind {other}"))),
        }
    }
}

/// Sequential little-endian writer over any `Write`.
pub struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(mut inner: W, kind: Kind) -> Result<Self> {
        inner.write_all(MAGIC)?;
        inner.write_all(&VERSION.to_le_bytes())?;
        inner.write_all(&[kind as u8])?;
        Ok(Self { inner })
    }

    pub fn put_u8(&mut self, v: u8) -> Result<()> {
        self.inner.write_all(&[v])?;
        Ok(())
    }

    pub fn put_u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn put_u64(&mut self, v: u64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn put_f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn put_f64_slice(&mut self, vs: &[f64]) -> Result<()> {
        for &v in vs {
            self.put_f64(v)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Sequential little-endian reader over any `Read`.
pub struct Reader<R: Read> {
    inner: R,
    pub kind: Kind,
}

impl<R: Read> Reader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        inner.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Container("bad magic string".into()));
        }
        let mut ver = [0u8; 4];
        inner.read_exact(&mut ver)?;
        let version = u32::from_le_bytes(ver);
        if version != VERSION {
            return Err(Error::Container(format!(
                "unsupported container version {version}"
            )));
        }
        let mut k = [0u8; 1];
        inner.read_exact(&mut k)?;
        Ok(Self {
            inner,
            kind: Kind::from_u8(k[0])?,
        })
    }

    pub fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Container(format!(
                "expected {kind:?} container, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn get_u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.inner.read_exact(&mut b)?;
        Ok(b[0])
    }

    pub fn get_u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.inner.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn get_u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn get_f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.inner.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn get_f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        self.inner.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

pub fn file_writer(path: &Path, kind: Kind) -> Result<Writer<BufWriter<File>>> {
    Writer::new(BufWriter::new(File::create(path)?), kind)
}

pub fn file_reader(path: &Path) -> Result<Reader<BufReader<File>>> {
    Reader::new(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOTMAGIC\x01\x00\x00\x00\x01".to_vec();
        assert!(Reader::new(&bytes[..]).is_err());
    }

    #[test]
    fn kind_mismatch_is_detected() {
        let mut buf = Vec::new();
        Writer::new(&mut buf, Kind::Basis).unwrap().finish().unwrap();
        let r = Reader::new(&buf[..]).unwrap();
        assert!(r.expect_kind(Kind::Dataset).is_err());
        assert!(r.expect_kind(Kind::Basis).is_ok());
    }

    proptest! {
        /// Payload floats survive a write/read cycle bit-exactly, including
        /// negative zero and subnormals.
        #[test]
        fn f64_roundtrip_is_bit_exact(vals in proptest::collection::vec(
            proptest::num::f64::ANY, 0..64)) {
            let mut buf = Vec::new();
            let mut w = Writer::new(&mut buf, Kind::Model).unwrap();
            w.put_u64(vals.len() as u64).unwrap();
            w.put_f64_slice(&vals).unwrap();
            w.finish().unwrap();
            let mut r = Reader::new(&buf[..]).unwrap();
            let n = r.get_u64().unwrap() as usize;
            let back = r.get_f64_vec(n).unwrap();
            prop_assert_eq!(vals.len(), back.len());
            for (a, b) in vals.iter().zip(back.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
