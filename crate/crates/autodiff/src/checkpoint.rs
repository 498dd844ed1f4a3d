//! Flat binary tensor files.
//!
//! Records are concatenated until end of file. Each record is
//! `u32 name_len | name (UTF-8) | u32 rank | rank x u32 dims | f64 values`,
//! all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_tensors<'a, W: Write>(mut w: W, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    for (name, t) in entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(Error::Checkpoint("truncated integer".into()));
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

fn require_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    read_u32(r)?.ok_or_else(|| Error::Checkpoint(format!("truncated before {what}")))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    while let Some(name_len) = read_u32(&mut r)? {
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = require_u32(&mut r, "rank")? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(require_u32(&mut r, "dims")? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Checkpoint(format!("{name}: truncated values")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

pub fn save_tensors<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), entries)
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    read_tensors(BufReader::new(File::open(path)?))
}
