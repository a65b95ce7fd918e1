//! Bilinear resampling, backward warping and stride padding.
//!
//! Resizing uses half-pixel centers: output cell `o` of an axis of length
//! `out` samples the input at `(o + 0.5) * in / out - 0.5`, clamped to the
//! valid range. Warping samples outside the raster clamp to the border.

use alloc::vec::Vec;

use crate::error::{arg_err, shape_err};
use crate::{FlowField, Raster, Result};

/// One output position along an axis: the two source taps and the weight of
/// the second one.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub t: f64,
}

impl Tap {
    /// Tap for a continuous source coordinate, clamped into `[0, len - 1]`.
    #[inline]
    pub fn at(coord: f64, len: usize) -> Tap {
        let max = (len - 1) as f64;
        let c = coord.clamp(0.0, max);
        let i0 = libm::floor(c) as usize;
        let i1 = (i0 + 1).min(len - 1);
        Tap {
            i0,
            i1,
            t: c - i0 as f64,
        }
    }
}

pub(crate) fn axis_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| Tap::at((o as f64 + 0.5) * scale - 0.5, in_len))
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

/// Bilinear sample of every channel at `(ty, tx)` into `out`.
#[inline]
fn sample_taps(r: &Raster, ty: Tap, tx: Tap, out: &mut [f64]) {
    let c00 = r.cell(ty.i0, tx.i0);
    let c01 = r.cell(ty.i0, tx.i1);
    let c10 = r.cell(ty.i1, tx.i0);
    let c11 = r.cell(ty.i1, tx.i1);
    for (k, o) in out.iter_mut().enumerate() {
        let top = lerp(c00[k], c01[k], tx.t);
        let bottom = lerp(c10[k], c11[k], tx.t);
        *o = lerp(top, bottom, ty.t);
    }
}

/// Bilinearly samples `r` at continuous position `(y, x)` with border
/// clamping, writing one value per channel into `out`.
pub fn sample_bilinear(r: &Raster, y: f64, x: f64, out: &mut [f64]) {
    sample_taps(r, Tap::at(y, r.height()), Tap::at(x, r.width()), out);
}

/// Resizes `r` to `out_h × out_w` with half-pixel-center bilinear
/// interpolation. Same-size resizes return an exact copy.
pub fn bilinear_resize(r: &Raster, out_h: usize, out_w: usize) -> Result<Raster> {
    if r.height() == 0 || r.width() == 0 || r.channels() == 0 {
        return Err(shape_err!("cannot resize an empty raster"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(arg_err!("target size {}x{} must be positive", out_h, out_w));
    }
    if (out_h, out_w) == (r.height(), r.width()) {
        return Ok(r.clone());
    }
    let ys = axis_taps(r.height(), out_h);
    let xs = axis_taps(r.width(), out_w);
    let c = r.channels();
    let mut out = Raster::zeros(out_h, out_w, c);
    crate::par::for_each_row(out.data_mut(), out_w * c, |y, row| {
        for (x, cell) in row.chunks_exact_mut(c).enumerate() {
            sample_taps(r, ys[y], xs[x], cell);
        }
    });
    Ok(out)
}

/// Adjoint of [`bilinear_resize`]: scatters `grad` (shaped like the resize
/// output) back onto an `in_h × in_w` raster.
pub fn bilinear_resize_backward(grad: &Raster, in_h: usize, in_w: usize) -> Result<Raster> {
    if (grad.height(), grad.width()) == (in_h, in_w) {
        return Ok(grad.clone());
    }
    if in_h == 0 || in_w == 0 {
        return Err(arg_err!("source size must be positive"));
    }
    let ys = axis_taps(in_h, grad.height());
    let xs = axis_taps(in_w, grad.width());
    let c = grad.channels();
    let mut out = Raster::zeros(in_h, in_w, c);
    for (y, ty) in ys.iter().enumerate() {
        for (x, tx) in xs.iter().enumerate() {
            let g = grad.cell(y, x);
            let weights = [
                (ty.i0, tx.i0, (1.0 - ty.t) * (1.0 - tx.t)),
                (ty.i0, tx.i1, (1.0 - ty.t) * tx.t),
                (ty.i1, tx.i0, ty.t * (1.0 - tx.t)),
                (ty.i1, tx.i1, ty.t * tx.t),
            ];
            for (sy, sx, w) in weights {
                if w == 0.0 {
                    continue;
                }
                let dst = out.cell_mut(sy, sx);
                for k in 0..c {
                    dst[k] += w * g[k];
                }
            }
        }
    }
    Ok(out)
}

/// Registers `r` onto the frame `flow` is attached to:
/// `out(x, y) = r(x + dx, y + dy)`, bilinear, border-clamped.
pub fn backward_warp(r: &Raster, flow: &FlowField) -> Result<Raster> {
    if (flow.height(), flow.width()) != (r.height(), r.width()) {
        return Err(shape_err!(
            "flow {}x{} does not match raster {}x{}",
            flow.height(),
            flow.width(),
            r.height(),
            r.width()
        ));
    }
    if r.is_empty() {
        return Ok(r.clone());
    }
    let (h, w, c) = r.dims();
    let mut out = Raster::zeros(h, w, c);
    crate::par::for_each_row(out.data_mut(), w * c, |y, row| {
        for (x, cell) in row.chunks_exact_mut(c).enumerate() {
            let (dx, dy) = flow.at(y, x);
            sample_bilinear(r, y as f64 + dy, x as f64 + dx, cell);
        }
    });
    Ok(out)
}

/// Bottom/right padding applied to reach a multiple of `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadInfo {
    pub pad_bottom: usize,
    pub pad_right: usize,
    pub stride: usize,
}

impl PadInfo {
    pub fn for_size(height: usize, width: usize, stride: usize) -> Result<PadInfo> {
        if stride == 0 {
            return Err(arg_err!("stride must be at least 1"));
        }
        let pad = |n: usize| (stride - n % stride) % stride;
        Ok(PadInfo {
            pad_bottom: pad(height),
            pad_right: pad(width),
            stride,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.pad_bottom == 0 && self.pad_right == 0
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.pad_bottom >= self.stride || self.pad_right >= self.stride {
            return Err(arg_err!("inconsistent pad info {:?}", self));
        }
        Ok(())
    }
}

/// Pads the bottom and right edges by replication up to the next multiple of
/// `stride`.
pub fn pad_to_multiple(r: &Raster, stride: usize) -> Result<(Raster, PadInfo)> {
    let info = PadInfo::for_size(r.height(), r.width(), stride)?;
    if info.is_identity() {
        return Ok((r.clone(), info));
    }
    if r.height() == 0 || r.width() == 0 {
        return Err(shape_err!("cannot pad an empty raster"));
    }
    let (h, w, c) = r.dims();
    let (ph, pw) = (h + info.pad_bottom, w + info.pad_right);
    let mut data = Vec::with_capacity(ph * pw * c);
    for y in 0..ph {
        let sy = y.min(h - 1);
        let row = &r.data()[sy * w * c..(sy + 1) * w * c];
        data.extend_from_slice(row);
        let last = &row[(w - 1) * c..];
        for _ in w..pw {
            data.extend_from_slice(last);
        }
    }
    Ok((Raster::new(ph, pw, c, data)?, info))
}

/// Removes the padding added by [`pad_to_multiple`].
pub fn unpad(r: &Raster, info: &PadInfo) -> Result<Raster> {
    info.validate()?;
    if info.pad_bottom > r.height() || info.pad_right > r.width() {
        return Err(shape_err!("padding exceeds raster size"));
    }
    r.crop(r.height() - info.pad_bottom, r.width() - info.pad_right)
}
