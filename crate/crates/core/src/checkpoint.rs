//! Flat parameter files: an 8-byte magic, the parameter count as a
//! little-endian `u64`, then each parameter as a little-endian `f64`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamVector;

pub const MAGIC: [u8; 8] = *b"CYFLPRM1";
pub const HEADER_LEN: usize = 16;

pub fn encode(params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * params.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<ParamVector, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("{} bytes is shorter than the header", bytes.len()));
    }
    if bytes[..8] != MAGIC {
        return Err("bad magic".into());
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if Some(body.len()) != count.checked_mul(8) {
        return Err(format!("header says {count} parameters, body holds {} bytes", body.len()));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect::<Vec<_>>()
        .into())
}

pub fn write_to<W: Write>(mut out: W, params: &[f64]) -> std::io::Result<()> {
    out.write_all(&encode(params))
}

pub fn read_from<R: Read>(mut input: R) -> std::io::Result<std::result::Result<ParamVector, String>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    Ok(decode(&buf))
}

pub fn save(path: impl AsRef<Path>, params: &[f64]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamVector> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::malformed(path, reason))
}
