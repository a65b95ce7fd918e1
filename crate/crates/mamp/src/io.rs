//! PNG frames and masks.
//!
//! Frames are 8-bit RGB (any PNG the `image` crate decodes is converted).
//! Masks are 8-bit indexed PNGs whose pixel values are object ids; grayscale
//! masks are read the same way.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use mamp_core::{ColorSpace, Image, IndexedMask, Raster};

use crate::error::format_err;
use crate::{Error, Result};

pub fn read_frame(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Ok(Image::new(
        Raster::new(h as usize, w as usize, 3, data)?,
        ColorSpace::Rgb,
    )?)
}

/// Writes an RGB image, rounding to 8 bits.
pub fn write_frame(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    if img.space() != ColorSpace::Rgb {
        return Err(format_err!("only RGB frames can be written"));
    }
    let bytes: Vec<u8> = img
        .raster()
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::save_buffer(
        path,
        &bytes,
        img.width() as u32,
        img.height() as u32,
        image::ColorType::Rgb8,
    )
    .map_err(|source| Error::Image {
        path: path.into(),
        source,
    })
}

/// The usual VOS label palette: id bits spread over the high bits of R, G, B.
pub fn palette() -> Vec<u8> {
    let mut out = Vec::with_capacity(256 * 3);
    for id in 0..256u32 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = id;
        for shift in (0..8).rev() {
            r |= ((c & 1) as u8) << shift;
            g |= (((c >> 1) & 1) as u8) << shift;
            b |= (((c >> 2) & 1) as u8) << shift;
            c >>= 3;
        }
        out.extend([r, g, b]);
    }
    out
}

fn unpack(row: &[u8], bits: usize, width: usize) -> impl Iterator<Item = u8> + '_ {
    let per_byte = 8 / bits;
    let mask = ((1u16 << bits) - 1) as u8;
    (0..width).map(move |x| {
        let byte = row[x / per_byte];
        let shift = 8 - bits * (x % per_byte + 1);
        (byte >> shift) & mask
    })
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<IndexedMask> {
    let path = path.as_ref();
    let png_err = |source| Error::Png {
        path: path.into(),
        source,
    };
    let file = File::open(path).map_err(Error::io(path))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let (color, depth) = reader.output_color_type();
    if !matches!(color, png::ColorType::Indexed | png::ColorType::Grayscale) || depth == png::BitDepth::Sixteen {
        return Err(format_err!(
            "{}: masks must be 8-bit (or packed) indexed or grayscale PNGs, found {:?} {:?}",
            path.display(),
            color,
            depth
        ));
    }
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| format_err!("{}: image too large", path.display()))?
    ];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bits = depth as usize;
    let mut ids = Vec::with_capacity(w * h);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        ids.extend(unpack(row, bits, w));
    }
    Ok(IndexedMask::new(h, w, ids)?)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &IndexedMask) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(Error::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), mask.width() as u32, mask.height() as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette());
    let enc_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(source) => Error::Io {
            path: path.into(),
            source,
        },
        other => format_err!("{}: {}", path.display(), other),
    };
    let mut writer = enc.write_header().map_err(enc_err)?;
    writer.write_image_data(mask.ids()).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

/// PNG files directly inside `dir`, sorted by file name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Subdirectories of `dir`, sorted by name.
pub fn list_dirs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// All frames of a directory, in file-name order.
pub fn read_frames(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    list_pngs(dir)?.iter().map(read_frame).collect()
}
