//! The SPC1 spectral cube file: magic `SPC1`, then B, H, W as u32 LE,
//! then B·H·W f32 LE values in band-major planar order.

use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::BANDS;

pub const CUBE_MAGIC: [u8; 4] = *b"SPC1";
pub const CUBE_HEADER_LEN: usize = 16;

pub fn encode_cube(cube: &Tensor<f32>) -> Result<Vec<u8>> {
    if cube.rank() != 3 || cube.numel() == 0 {
        return Err(Error::RejectedInput(format!("a cube must be non-empty (B, H, W), got {:?}", cube.shape())));
    }
    let mut out = Vec::with_capacity(CUBE_HEADER_LEN + 4 * cube.numel());
    out.extend_from_slice(&CUBE_MAGIC);
    for d in cube.shape() {
        let d = u32::try_from(*d).map_err(|_| Error::RejectedInput(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in cube.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn parse_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn decode_cube(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 4 || bytes[..4] != CUBE_MAGIC {
        return Err(parse_err(0, "bad magic, expected `SPC1`"));
    }
    if bytes.len() < CUBE_HEADER_LEN {
        return Err(parse_err(bytes.len(), "truncated header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (b, h, w) = (dim(0), dim(1), dim(2));
    if b == 0 || h == 0 || w == 0 {
        return Err(parse_err(4, format!("zero dimension in {b}×{h}×{w}")));
    }
    if b != BANDS {
        warn!("cube has {b} bands, expected {BANDS}");
    }
    let n = b
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| parse_err(4, "dimensions overflow"))?;
    let payload = &bytes[CUBE_HEADER_LEN..];
    if payload.len() / 4 < n {
        return Err(parse_err(
            bytes.len(),
            format!("truncated payload: {} of {} bytes", payload.len(), 4 * n),
        ));
    }
    if payload.len() > 4 * n {
        return Err(parse_err(CUBE_HEADER_LEN + 4 * n, "trailing bytes after payload"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::from_vec(&[b, h, w], data)
}

pub fn write_cube(path: &Path, cube: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_cube(cube)?).map_err(|e| Error::io(path, e))
}

pub fn read_cube(path: &Path) -> Result<Tensor<f32>> {
    decode_cube(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
