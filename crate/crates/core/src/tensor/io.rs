//! Portable tensor files: `PTNSR1`, little-endian `u32` rank, `u32` dims,
//! then the row-major payload as little-endian `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const PTNSR_MAGIC: &[u8; 6] = b"PTNSR1";

pub fn write_ptnsr<W: Write>(mut w: W, t: &Tensor) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(10 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(PTNSR_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_ptnsr<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<ptnsr stream>", e))?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<Tensor> {
    let bad = |detail: &str| Error::Format {
        format: "ptnsr",
        detail: detail.to_string(),
    };
    if bytes.len() < 10 || &bytes[..6] != PTNSR_MAGIC {
        return Err(bad("missing PTNSR1 magic"));
    }
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = u32_at(6)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(u32_at(10 + 4 * i)? as usize);
    }
    let start = 10 + 4 * rank;
    let n: usize = shape.iter().product();
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != 4 * n {
        return Err(bad(&format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(shape, data)
}

pub fn write_ptnsr_file(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ptnsr(std::io::BufWriter::new(file), t).map_err(|e| Error::io(path, e))
}

pub fn read_ptnsr_file(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}
