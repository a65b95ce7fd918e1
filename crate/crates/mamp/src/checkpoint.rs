//! Encoder checkpoints.
//!
//! Layout: the bytes `MAMPCKPT`, a version byte, then for every tensor its
//! name length (`u32`), UTF-8 name, rank (`u32`), dimensions (`u32` each) and
//! row-major `f32` payload, all little-endian. Tensors run to the end of the
//! file.

use std::path::Path;

use mamp_core::encoder::{EncoderConfig, EncoderParams, Tensor};

use crate::error::format_err;
use crate::{Error, Result};

pub const MAGIC: [u8; 8] = *b"MAMPCKPT";
pub const VERSION: u8 = 1;

/// Architectures a checkpoint can be matched against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Architecture {
    /// Whichever of the known configurations fits the tensors.
    #[default]
    Auto,
    Full,
    Toy,
}

impl Architecture {
    pub fn config(self) -> Option<EncoderConfig> {
        match self {
            Architecture::Auto => None,
            Architecture::Full => Some(EncoderConfig::full()),
            Architecture::Toy => Some(EncoderConfig::toy()),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| format_err!("{} does not fit in 32 bits", v))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(params: &EncoderParams) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(9 + params.num_values() * 4);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    for t in params.tensors() {
        put_u32(&mut out, t.name.len())?;
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.shape.len())?;
        for &d in &t.shape {
            put_u32(&mut out, d)?;
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format_err!("checkpoint truncated in {} at byte {}", what, self.pos));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    if bytes.len() < 9 || bytes[..8] != MAGIC {
        return Err(format_err!("not a checkpoint (bad magic)"));
    }
    if bytes[8] != VERSION {
        return Err(format_err!("unsupported checkpoint version {}", bytes[8]));
    }
    let mut cur = Cursor { bytes, pos: 9 };
    let mut tensors = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32("name length")?;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| format_err!("tensor name is not UTF-8"))?
            .to_owned();
        let rank = cur.u32("rank")?;
        let shape = (0..rank).map(|_| cur.u32("dims")).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| format_err!("tensor {} is too large", name))?;
        let data: Vec<f64> = cur
            .take(n, &name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(format_err!("tensor {} has non-finite values", name));
        }
        tensors.push(Tensor { name, shape, data });
    }
    Ok(tensors)
}

/// Matches decoded tensors to an architecture.
pub fn into_params(tensors: Vec<Tensor>, arch: Architecture) -> Result<(EncoderConfig, EncoderParams)> {
    let candidates = match arch.config() {
        Some(c) => vec![c],
        None => vec![EncoderConfig::full(), EncoderConfig::toy()],
    };
    let mut last = None;
    for config in candidates {
        match EncoderParams::from_tensors(&config, tensors.clone()) {
            Ok(p) => return Ok((config, p)),
            Err(e) => last = Some(e),
        }
    }
    Err(format_err!(
        "checkpoint does not match a known encoder: {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    ))
}

pub fn save(path: impl AsRef<Path>, params: &EncoderParams) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(params)?).map_err(Error::io(path))
}

pub fn load(path: impl AsRef<Path>, arch: Architecture) -> Result<(EncoderConfig, EncoderParams)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let in_file = |e: Error| match e {
        Error::Format(m) => Error::Format(format!("{}: {}", path.display(), m)),
        other => other,
    };
    into_params(decode(&bytes).map_err(in_file)?, arch).map_err(in_file)
}

/// Rounds every parameter to the nearest `f32`, the precision checkpoints
/// store.
pub fn quantize(params: &EncoderParams) -> EncoderParams {
    let mut p = params.clone();
    for t in p.tensors_mut() {
        for v in &mut t.data {
            *v = *v as f32 as f64;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_first_tensor() {
        let params = EncoderParams::init(&EncoderConfig::toy(), 3).unwrap();
        let bytes = encode(&params).unwrap();
        assert_eq!(&bytes[..8], b"MAMPCKPT");
        assert_eq!(bytes[8], VERSION);
        let name = b"conv1.weight";
        assert_eq!(&bytes[9..13], &(name.len() as u32).to_le_bytes());
        assert_eq!(&bytes[13..13 + name.len()], name);
        let at = 13 + name.len();
        assert_eq!(&bytes[at..at + 4], &4u32.to_le_bytes());
        let dims: Vec<u32> = (0..4)
            .map(|i| u32::from_le_bytes(bytes[at + 4 + 4 * i..at + 8 + 4 * i].try_into().unwrap()))
            .collect();
        assert_eq!(dims, [3, 3, 3, 16]);
        let first = f32::from_le_bytes(bytes[at + 20..at + 24].try_into().unwrap());
        assert_eq!(first, params.tensors()[0].data[0] as f32);
    }

    #[test]
    fn architecture_is_inferred() {
        let params = quantize(&EncoderParams::init(&EncoderConfig::toy(), 1).unwrap());
        let tensors = decode(&encode(&params).unwrap()).unwrap();
        let (config, back) = into_params(tensors.clone(), Architecture::Auto).unwrap();
        assert_eq!(config, EncoderConfig::toy());
        assert_eq!(back, params);
        assert!(into_params(tensors, Architecture::Full).is_err());
    }

    #[test]
    fn rejects_malformed() {
        let params = EncoderParams::init(&EncoderConfig::toy(), 0).unwrap();
        let good = encode(&params).unwrap();
        let mut bad = good.clone();
        bad[3] ^= 0x20;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut version = good.clone();
        version[8] = 9;
        assert!(decode(&version).is_err());
        assert!(decode(&good[..good.len() - 2]).is_err());
        assert!(decode(&good[..5]).is_err());
        // a tensor missing at the end decodes but matches no architecture
        let short = decode(&good).unwrap();
        assert!(into_params(short[..short.len() - 1].to_vec(), Architecture::Auto).is_err());
    }
}
