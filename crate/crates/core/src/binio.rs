//! Little-endian primitives shared by the binary artifact formats.

use std::io::{Read, Write};

use crate::error::{CoreError, Result};

pub fn put_u8<W: Write>(w: &mut W, v: u8) -> Result<()> {
    Ok(w.write_all(&[v])?)
}

pub fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

pub fn put_f32s<W: Write>(w: &mut W, v: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 4);
    v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    Ok(w.write_all(&buf)?)
}

/// Length-prefixed (u32) byte string.
pub fn put_bytes<W: Write>(w: &mut W, v: &[u8]) -> Result<()> {
    put_u32(w, len32(v.len())?)?;
    Ok(w.write_all(v)?)
}

pub fn len32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| CoreError::Format(format!("length {n} does not fit in 32 bits")))
}

fn take<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| CoreError::Format(format!("truncated file: {e}")))?;
    Ok(b)
}

pub fn get_u8<R: Read>(r: &mut R) -> Result<u8> {
    Ok(take::<R, 1>(r)?[0])
}

pub fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r)?))
}

pub fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r)?))
}

pub fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(take(r)?))
}

/// Reads `n` values; refuses absurd sizes before allocating.
pub fn get_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    if n > 1 << 30 {
        return Err(CoreError::Format(format!("section of {n} values is implausible")));
    }
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|e| CoreError::Format(format!("truncated file: {e}")))?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn get_bytes<R: Read>(r: &mut R, limit: usize) -> Result<Vec<u8>> {
    let n = get_u32(r)? as usize;
    if n > limit {
        return Err(CoreError::Format(format!("string of {n} bytes exceeds {limit}")));
    }
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| CoreError::Format(format!("truncated file: {e}")))?;
    Ok(buf)
}

pub fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let got: [u8; 8] = take(r)?;
    if &got != magic {
        return Err(CoreError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}
