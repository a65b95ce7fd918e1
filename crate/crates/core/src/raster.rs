//! Dense row-major rasters with interleaved channels.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err};
use crate::{Error, Result};

/// An `height × width × channels` block of reals, stored row-major with the
/// channels of one cell adjacent (`(y * width + x) * channels + c`).
///
/// Backs feature maps, label maps and flow fields alike.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "{}x{}x{} raster needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a raster by evaluating `f(y, x, c)` at every position.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `(height, width, channels)`
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    /// The channel vector of cell `(y, x)`.
    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Cell by flat index `y * width + x`.
    #[inline]
    pub fn cell_at(&self, index: usize) -> &[f64] {
        let start = index * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Extracts one channel as a single-channel raster.
    pub fn channel(&self, c: usize) -> Result<Raster> {
        if c >= self.channels {
            return Err(arg_err!("channel {} of {}", c, self.channels));
        }
        let data = self.data.chunks_exact(self.channels).map(|cell| cell[c]).collect();
        Raster::new(self.height, self.width, 1, data)
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Largest absolute element-wise difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Raster) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    /// Crops the top-left `height × width` window.
    pub fn crop(&self, height: usize, width: usize) -> Result<Raster> {
        if height > self.height || width > self.width {
            return Err(shape_err!(
                "cannot crop {}x{} out of {}x{}",
                height,
                width,
                self.height,
                self.width
            ));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let start = y * self.width * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Raster::new(height, width, c, data)
    }
}

/// Color space tag of an [`Image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    /// sRGB with components in `[0, 1]`.
    Rgb,
    /// CIELAB (D65): `L ∈ [0, 100]`, `a, b` roughly in `[-128, 127]`.
    Lab,
}

/// A three-channel frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    raster: Raster,
    space: ColorSpace,
}

impl Image {
    pub fn new(raster: Raster, space: ColorSpace) -> Result<Self> {
        if raster.channels() != 3 {
            return Err(shape_err!("image needs 3 channels, got {}", raster.channels()));
        }
        Ok(Self { raster, space })
    }

    pub fn from_fn(height: usize, width: usize, space: ColorSpace, f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        Self {
            raster: Raster::from_fn(height, width, 3, f),
            space,
        }
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn raster(&self) -> &Raster {
        &self.raster
    }

    pub fn into_raster(self) -> Raster {
        self.raster
    }

    pub fn height(&self) -> usize {
        self.raster.height()
    }

    pub fn width(&self) -> usize {
        self.raster.width()
    }
}

/// Per-pixel displacement `(dx, dy)` in pixels of the raster it registers.
///
/// A flow `f` attached to a query frame points, for every query pixel `p`, at
/// `p + f(p)` in the reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField(Raster);

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Raster::zeros(height, width, 2))
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        Self(Raster::from_fn(
            height,
            width,
            2,
            |_, _, c| {
                if c == 0 {
                    dx
                } else {
                    dy
                }
            },
        ))
    }

    pub fn from_raster(raster: Raster) -> Result<Self> {
        if raster.channels() != 2 {
            return Err(shape_err!("flow field needs 2 channels, got {}", raster.channels()));
        }
        raster.ensure_finite("flow field")?;
        Ok(Self(raster))
    }

    /// Interleaved `(dx, dy)` values, row-major.
    pub fn from_interleaved(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_raster(Raster::new(height, width, 2, data)?)
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let v = self.0.cell(y, x);
        (v[0], v[1])
    }

    pub fn set(&mut self, y: usize, x: usize, dx: f64, dy: f64) {
        let v = self.0.cell_mut(y, x);
        v[0] = dx;
        v[1] = dy;
    }

    pub fn raster(&self) -> &Raster {
        &self.0
    }

    pub fn into_raster(self) -> Raster {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.data().iter().all(|&v| v == 0.0)
    }
}

/// Per-pixel object ids; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedMask {
    height: usize,
    width: usize,
    ids: Vec<u8>,
}

impl IndexedMask {
    pub fn new(height: usize, width: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(shape_err!(
                "{}x{} mask needs {} ids, got {}",
                height,
                width,
                height * width,
                ids.len()
            ));
        }
        Ok(Self { height, width, ids })
    }

    pub fn filled(height: usize, width: usize, id: u8) -> Self {
        Self {
            height,
            width,
            ids: vec![id; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut ids = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                ids.push(f(y, x));
            }
        }
        Self { height, width, ids }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<u8> {
        self.ids
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.ids[y * self.width + x]
    }

    pub fn max_id(&self) -> u8 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    /// Pixels equal to `id`.
    pub fn binary(&self, id: u8) -> Vec<bool> {
        self.ids.iter().map(|&v| v == id).collect()
    }
}
