//! Zero-padded 2-D convolution on HWC rasters, forward and reverse.
//!
//! Weights are laid out `[ky][kx][in][out]` so the innermost loop of both the
//! forward pass and the weight gradient runs over contiguous output channels.
//! Padding is `kernel / 2` on every side.

use alloc::vec;
use alloc::vec::Vec;

use crate::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub kernel: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvShape {
    #[inline]
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_len(&self, len: usize) -> usize {
        (len + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    #[inline]
    fn weight_row(&self, ky: usize, kx: usize, ci: usize) -> usize {
        ((ky * self.kernel + kx) * self.cin + ci) * self.cout
    }
}

#[inline]
fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn forward(input: &Raster, weight: &[f64], bias: &[f64], s: ConvShape) -> Raster {
    debug_assert_eq!(input.channels(), s.cin);
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = (s.out_len(h), s.out_len(w));
    let pad = s.pad() as isize;
    let mut out = Raster::zeros(oh, ow, s.cout);
    crate::par::for_each_row(out.data_mut(), ow * s.cout, |oy, row| {
        for (ox, acc) in row.chunks_exact_mut(s.cout).enumerate() {
            acc.copy_from_slice(bias);
            for ky in 0..s.kernel {
                let iy = (oy * s.stride) as isize + ky as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..s.kernel {
                    let ix = (ox * s.stride) as isize + kx as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = input.cell(iy as usize, ix as usize);
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let r = s.weight_row(ky, kx, ci);
                        axpy(acc, v, &weight[r..r + s.cout]);
                    }
                }
            }
        }
    });
    out
}

/// Gradients of a convolution given the upstream gradient `grad`.
pub(crate) struct ConvGrads {
    pub input: Option<Raster>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn backward(input: &Raster, weight: &[f64], grad: &Raster, s: ConvShape, need_input: bool) -> ConvGrads {
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = (grad.height(), grad.width());
    let pad = s.pad() as isize;

    let mut bias = vec![0.0; s.cout];
    for g in grad.data().chunks_exact(s.cout) {
        axpy(&mut bias, 1.0, g);
    }

    // One weight row per (ky, kx, ci); each row is owned by one worker.
    let mut gw = vec![0.0; s.kernel * s.kernel * s.cin * s.cout];
    crate::par::for_each_row(&mut gw, s.cout, |r, acc| {
        let ci = r % s.cin;
        let kx = (r / s.cin) % s.kernel;
        let ky = r / (s.cin * s.kernel);
        for oy in 0..oh {
            let iy = (oy * s.stride) as isize + ky as isize - pad;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ox in 0..ow {
                let ix = (ox * s.stride) as isize + kx as isize - pad;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let v = input.get(iy as usize, ix as usize, ci);
                if v != 0.0 {
                    axpy(acc, v, grad.cell(oy, ox));
                }
            }
        }
    });

    let input_grad = need_input.then(|| {
        let mut gi = Raster::zeros(h, w, s.cin);
        crate::par::for_each_row(gi.data_mut(), w * s.cin, |iy, row| {
            for (ix, acc) in row.chunks_exact_mut(s.cin).enumerate() {
                for ky in 0..s.kernel {
                    let t = iy as isize + pad - ky as isize;
                    if t < 0 || t % s.stride as isize != 0 {
                        continue;
                    }
                    let oy = (t / s.stride as isize) as usize;
                    if oy >= oh {
                        continue;
                    }
                    for kx in 0..s.kernel {
                        let t = ix as isize + pad - kx as isize;
                        if t < 0 || t % s.stride as isize != 0 {
                            continue;
                        }
                        let ox = (t / s.stride as isize) as usize;
                        if ox >= ow {
                            continue;
                        }
                        let g = grad.cell(oy, ox);
                        for (ci, a) in acc.iter_mut().enumerate() {
                            let r = s.weight_row(ky, kx, ci);
                            *a += dot(&weight[r..r + s.cout], g);
                        }
                    }
                }
            }
        });
        gi
    });

    ConvGrads {
        input: input_grad,
        weight: gw,
        bias,
    }
}
