//! sRGB ↔ CIELAB conversion and the chroma-channel dropout used to build
//! self-supervised reconstruction targets.

use alloc::vec::Vec;

use crate::error::arg_err;
use crate::{ColorSpace, Error, Image, Raster, Result};

/// Linear sRGB → XYZ (D65).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// Reference white: the XYZ image of sRGB white under the matrix above, so
/// `(1, 1, 1)` lands exactly on `a = b = 0`.
const WHITE: [f64; 3] = [
    RGB_TO_XYZ[0][0] + RGB_TO_XYZ[0][1] + RGB_TO_XYZ[0][2],
    RGB_TO_XYZ[1][0] + RGB_TO_XYZ[1][1] + RGB_TO_XYZ[1][2],
    RGB_TO_XYZ[2][0] + RGB_TO_XYZ[2][1] + RGB_TO_XYZ[2][2],
];

const DELTA: f64 = 6.0 / 29.0;

fn srgb_decode(v: f64) -> f64 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        libm::pow((v + 0.055) / 1.055, 2.4)
    }
}

fn srgb_encode(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * libm::pow(v, 1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        libm::cbrt(t)
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// Converts one sRGB triple in `[0, 1]` to `(L, a, b)`.
pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_decode);
    let mut xyz = [0.0; 3];
    for (row, out) in RGB_TO_XYZ.iter().zip(xyz.iter_mut()) {
        *out = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Inverse of [`rgb_to_lab_pixel`]. Out-of-gamut colors are not clipped.
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let xyz = [
        WHITE[0] * lab_f_inv(fx),
        WHITE[1] * lab_f_inv(fy),
        WHITE[2] * lab_f_inv(fz),
    ];
    let lin = solve3(&RGB_TO_XYZ, xyz);
    lin.map(srgb_encode)
}

// Cramer's rule; the matrix is a fixed, well-conditioned constant.
fn solve3(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    let det = |a: [[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det(*m);
    let mut out = [0.0; 3];
    for (col, o) in out.iter_mut().enumerate() {
        let mut a = *m;
        for row in 0..3 {
            a[row][col] = v[row];
        }
        *o = det(a) / d;
    }
    out
}

fn convert(img: &Image, from: ColorSpace, to: ColorSpace, f: fn([f64; 3]) -> [f64; 3]) -> Result<Image> {
    if img.space() != from {
        return Err(arg_err!("expected a {:?} image, got {:?}", from, img.space()));
    }
    img.raster().ensure_finite("image")?;
    let src = img.raster();
    let mut data = Vec::with_capacity(src.data().len());
    for px in src.data().chunks_exact(3) {
        data.extend_from_slice(&f([px[0], px[1], px[2]]));
    }
    Image::new(Raster::new(src.height(), src.width(), 3, data)?, to)
}

/// sRGB → CIELAB under D65.
pub fn rgb_to_lab(img: &Image) -> Result<Image> {
    convert(img, ColorSpace::Rgb, ColorSpace::Lab, rgb_to_lab_pixel)
}

/// CIELAB → sRGB; inverse of [`rgb_to_lab`].
pub fn lab_to_rgb(img: &Image) -> Result<Image> {
    convert(img, ColorSpace::Lab, ColorSpace::Rgb, lab_to_rgb_pixel)
}

/// One of the three Lab channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabChannel {
    L,
    A,
    B,
}

impl LabChannel {
    pub fn index(self) -> usize {
        match self {
            LabChannel::L => 0,
            LabChannel::A => 1,
            LabChannel::B => 2,
        }
    }
}

/// Zeroes one chroma channel of a Lab image and returns it separately.
///
/// The zeroed image is the encoder input; the extracted channel is the
/// reconstruction target. Dropping `L` is rejected.
pub fn channel_dropout(img: &Image, channel: LabChannel) -> Result<(Image, Raster)> {
    if img.space() != ColorSpace::Lab {
        return Err(arg_err!("channel dropout needs a Lab image"));
    }
    if channel == LabChannel::L {
        return Err(Error::InvalidArgument("only the a or b channel may be dropped".into()));
    }
    let c = channel.index();
    let target = img.raster().channel(c)?;
    let mut input = img.raster().clone();
    for px in input.data_mut().chunks_exact_mut(3) {
        px[c] = 0.0;
    }
    Ok((Image::new(input, ColorSpace::Lab)?, target))
}

/// Writes `target` back into the dropped channel of `input`.
pub fn reinsert_channel(input: &Image, target: &Raster, channel: LabChannel) -> Result<Image> {
    if target.channels() != 1 || target.height() != input.height() || target.width() != input.width() {
        return Err(arg_err!("target does not match the image"));
    }
    let c = channel.index();
    let mut out = input.raster().clone();
    for (px, &v) in out.data_mut().chunks_exact_mut(3).zip(target.data()) {
        px[c] = v;
    }
    Image::new(out, input.space())
}
