//! Flat binary parameter container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      4 bytes  "RGCK"
//! version    u32      currently 1
//! count      u32      number of records
//! record * count:
//!   name_len u32
//!   name     name_len bytes, UTF-8
//!   ndim     u32
//!   dims     u32 * ndim
//!   data     f32 * product(dims), row-major
//! ```
//!
//! Nothing follows the last record; trailing bytes are a format error.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RGCK";
pub const VERSION: u32 = 1;

pub fn write<'a>(path: &Path, records: impl Iterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<()> {
    let records: Vec<_> = records.collect();
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path)?;
    let fmt = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = Reader {
        path,
        buf: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("record count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| fmt(format!("record name: {e}")))?
            .to_string();
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dims")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(fmt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let a = Tensor::new([2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 3.0e7]).unwrap();
        let b = Tensor::scalar(0.125f32);
        write(&path, [("a", &a), ("layer.b", &b)].into_iter()).unwrap();
        let back = read(&path).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("layer.b".to_string(), b)]);

        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read(&path), Err(Error::Truncated { .. })));

        let mut bad = bytes.clone();
        bad[4] = 9;
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read(&path), Err(Error::Version { found: 9, .. })));
    }
}
