//! Flat parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"CRLCKPT1"
//! u64 manifest length, manifest bytes (UTF-8 JSON)
//! u64 parameter count
//! per parameter:
//!   u32 name length, name bytes (UTF-8)
//!   u32 rank, rank x u64 dims
//!   product(dims) x f64 payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use super::{Array, ParamStore, Scalar};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CRLCKPT1";

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut out: W,
    params: &ParamStore<T>,
    manifest: &Value,
) -> Result<()> {
    out.write_all(MAGIC)?;
    let manifest = serde_json::to_vec(manifest)?;
    out.write_all(&(manifest.len() as u64).to_le_bytes())?;
    out.write_all(&manifest)?;
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, arr) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(arr.shape().len() as u32).to_le_bytes())?;
        for &d in arr.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(arr.len() * 8);
        for &x in arr.data() {
            buf.extend_from_slice(&x.as_f64().to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<(ParamStore<T>, Value)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let manifest_len = read_u64(&mut input)? as usize;
    let mut manifest = vec![0u8; manifest_len];
    input.read_exact(&mut manifest)?;
    let manifest: Value = serde_json::from_slice(&manifest)?;
    let count = read_u64(&mut input)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut input)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        params.insert(name, Array::new(shape, data)?)?;
    }
    Ok((params, manifest))
}

pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ParamStore<T>, manifest: &Value) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, params, manifest)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, Value)> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
