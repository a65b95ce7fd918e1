//! Middlebury `.flo`: the bytes `PIEH`, width and height as little-endian
//! `u32`, then row-major `(dx, dy)` pairs as little-endian `f32`.
//!
//! Flow is held in `f64`; writing rounds to `f32`, so a field read from a
//! file writes back byte for byte.

use std::path::Path;

use mamp_core::FlowField;

use crate::error::format_err;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"PIEH";
const HEADER: usize = 12;

pub fn encode(flow: &FlowField) -> Result<Vec<u8>> {
    let (h, w) = (flow.height(), flow.width());
    let (w32, h32) = (u32::try_from(w), u32::try_from(h));
    let (Ok(w32), Ok(h32)) = (w32, h32) else {
        return Err(format_err!("flow {}x{} is too large for .flo", w, h));
    };
    let mut out = Vec::with_capacity(HEADER + h * w * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&w32.to_le_bytes());
    out.extend_from_slice(&h32.to_le_bytes());
    for &v in flow.raster().data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < HEADER {
        return Err(format_err!("truncated .flo header ({} bytes)", bytes.len()));
    }
    if bytes[..4] != MAGIC {
        return Err(format_err!("bad .flo magic {:?}", &bytes[..4]));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (w, h) = (word(4), word(8));
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER))
        .ok_or_else(|| format_err!(".flo dimensions {}x{} overflow", w, h))?;
    if bytes.len() != expected {
        return Err(format_err!(
            ".flo payload for {}x{} should be {} bytes, found {}",
            w,
            h,
            expected,
            bytes.len()
        ));
    }
    let data: Vec<f64> = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        let p = i / 2;
        return Err(format_err!("non-finite flow at pixel (x {}, y {})", p % w, p / w));
    }
    Ok(FlowField::from_interleaved(h, w, data)?)
}

pub fn read(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {}", path.display(), m)),
        other => other,
    })
}

pub fn write(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(flow)?).map_err(Error::io(path))
}

/// File name of the flow from `query` to `reference` inside a flow directory.
pub fn pair_file_name(query: usize, reference: usize) -> String {
    format!("flow_{query}_{reference}.flo")
}
