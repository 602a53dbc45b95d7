//! Little-endian primitives shared by the binary file formats.

use crate::error::{MateError, Result};
use std::io::{Read, Write};

pub(crate) fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| MateError::Format(format!("{v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn put_str(w: &mut impl Write, s: &str) -> Result<()> {
    put_u32(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn get_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub(crate) fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub(crate) fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads `n` values; `n` comes from an untrusted header, so allocation
/// grows with the bytes actually present.
pub(crate) fn get_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n.min(1 << 16));
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

pub(crate) fn get_str(r: &mut impl Read) -> Result<String> {
    let n = get_u32(r)?;
    if n > 1 << 20 {
        return Err(MateError::Format(format!("string of {n} bytes")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| MateError::Format("string is not UTF-8".into()))
}
