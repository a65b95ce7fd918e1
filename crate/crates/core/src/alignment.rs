//! Moving supervision signals between image and feature resolution.
//!
//! A stride-`n` encoder built from stride-2 convolutions places the center of
//! feature cell `i` over pixel `n·i + (n − 1) / 2` of a zero-origin input whose
//! size is a multiple of `n`. Downsampling therefore pads the signal to a
//! multiple of `n` and point-samples those pixels; upsampling resizes to the
//! padded size and crops the padding away again.

use crate::error::shape_err;
use crate::matching::LabelMap;
use crate::resample::{bilinear_resize, pad_to_multiple, unpad};
use crate::{Raster, Result};

pub use crate::resample::PadInfo;

/// Alignment strategy between image and feature resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignMode {
    /// Pad to the stride, kernel-center sampling down, resize-then-unpad up.
    #[default]
    SizeAware,
    /// Bilinear resize straight to the target size in both directions.
    Plain,
}

/// Pixel sampled for feature cell `i` at stride `n`.
#[inline]
pub fn kernel_center(i: usize, n: usize) -> usize {
    n * i + (n - 1) / 2
}

/// Kernel-center point sampling of a raster whose dimensions are already
/// multiples of `n`.
pub fn sample_kernel_centers(signal: &Raster, n: usize) -> Result<Raster> {
    let (h, w, c) = signal.dims();
    if n == 0 || h % n != 0 || w % n != 0 {
        return Err(shape_err!("{}x{} is not a multiple of stride {}", h, w, n));
    }
    let mut out = Raster::zeros(h / n, w / n, c);
    for y in 0..h / n {
        for x in 0..w / n {
            out.cell_mut(y, x)
                .copy_from_slice(signal.cell(kernel_center(y, n), kernel_center(x, n)));
        }
    }
    Ok(out)
}

/// Pads `signal` to a multiple of `n` and samples it at the kernel centers.
pub fn align_down(signal: &LabelMap, n: usize) -> Result<(LabelMap, PadInfo)> {
    let (padded, info) = pad_to_multiple(signal, n)?;
    Ok((sample_kernel_centers(&padded, n)?, info))
}

/// Bilinear upsampling to the padded size followed by unpadding to
/// `(out_h, out_w)`.
pub fn align_up(signal: &LabelMap, pad: &PadInfo, out_h: usize, out_w: usize) -> Result<LabelMap> {
    pad.validate()?;
    let n = pad.stride;
    let (ph, pw) = (out_h + pad.pad_bottom, out_w + pad.pad_right);
    if signal.height() * n != ph || signal.width() * n != pw {
        return Err(shape_err!(
            "{}x{} at stride {} cannot cover {}x{} with padding {:?}",
            signal.height(),
            signal.width(),
            n,
            out_h,
            out_w,
            pad
        ));
    }
    let up = bilinear_resize(signal, ph, pw)?;
    unpad(&up, pad)
}

/// Downsampling under `mode` to a `(fh, fw)` feature grid at stride `n`.
///
/// `SizeAware` requires `(fh, fw)` to be the padded size divided by `n`.
pub fn downsample(signal: &LabelMap, mode: AlignMode, n: usize, fh: usize, fw: usize) -> Result<LabelMap> {
    match mode {
        AlignMode::SizeAware => {
            let (out, _) = align_down(signal, n)?;
            if (out.height(), out.width()) != (fh, fw) {
                return Err(shape_err!(
                    "aligned signal is {}x{}, features are {}x{}",
                    out.height(),
                    out.width(),
                    fh,
                    fw
                ));
            }
            Ok(out)
        }
        AlignMode::Plain => bilinear_resize(signal, fh, fw),
    }
}

/// Upsampling under `mode` back to `(out_h, out_w)` pixels.
pub fn upsample(signal: &LabelMap, mode: AlignMode, n: usize, out_h: usize, out_w: usize) -> Result<LabelMap> {
    match mode {
        AlignMode::SizeAware => align_up(signal, &PadInfo::for_size(out_h, out_w, n)?, out_h, out_w),
        AlignMode::Plain => bilinear_resize(signal, out_h, out_w),
    }
}
