//! Raw tensor files.
//!
//! A single tensor record is the 8-byte magic `WFNOTNSR`, a little-endian
//! `u32` rank, `rank` little-endian `u32` extents, then the `f64` data in
//! row-major order (little-endian). A named container is a sequence of
//! entries, each a `u32` name length, the UTF-8 name, and one tensor record.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"WFNOTNSR";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_record<R: Read>(r: &mut R, path: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::format(path, reason.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated tensor magic"))?;
    if &magic != MAGIC {
        return Err(bad("bad tensor magic"));
    }
    let rank = read_u32(r).map_err(|_| bad("truncated rank"))? as usize;
    if rank == 0 || rank > 16 {
        return Err(bad("unsupported tensor rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r).map_err(|_| bad("truncated extents"))? as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw).map_err(|_| bad("truncated tensor data"))?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(&shape, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(16 + t.len() * 8);
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = bytes.as_slice();
    let t = read_record(&mut cur, path)?;
    if !cur.is_empty() {
        return Err(Error::format(path, "trailing bytes after tensor"));
    }
    Ok(t)
}

/// Write named tensors in order.
pub fn save_named(entries: &[(String, Tensor)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_named(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cur = bytes.as_slice();
    let mut out = Vec::new();
    while !cur.is_empty() {
        let len = read_u32(&mut cur).map_err(|_| Error::format(path, "truncated entry name"))? as usize;
        if cur.len() < len {
            return Err(Error::format(path, "truncated entry name"));
        }
        let name = std::str::from_utf8(&cur[..len])
            .map_err(|_| Error::format(path, "entry name is not UTF-8"))?
            .to_string();
        cur = &cur[len..];
        out.push((name, read_record(&mut cur, path)?));
    }
    Ok(out)
}
