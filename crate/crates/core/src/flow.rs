//! Optical flow for motion-aware matching.
//!
//! Flow always points from the query frame to a reference frame: a query pixel
//! at `(x, y)` is found at `(x + dx, y + dy)` in the reference. The built-in
//! estimator is exhaustive integer block matching; externally computed fields
//! can be supplied per `(query, reference)` pair through [`FlowOverrides`].

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err};
use crate::resample::{bilinear_resize, pad_to_multiple};
use crate::{FlowField, Image, Raster, Result};

/// Candidate displacements within `±search`, nearest first, then by `dy`,
/// then by `dx`.
fn displacements(search: usize) -> Vec<(isize, isize)> {
    let s = search as isize;
    let mut out: Vec<(isize, isize)> = (-s..=s).flat_map(|dy| (-s..=s).map(move |dx| (dx, dy))).collect();
    out.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
    out
}

/// Sum of absolute differences between the query block at rows `ys`, columns
/// `xs` and the reference shifted by `(dx, dy)` (border-clamped). Stops early
/// once `bound` is exceeded.
fn block_sad(
    q: &Raster,
    r: &Raster,
    ys: core::ops::Range<usize>,
    xs: core::ops::Range<usize>,
    (dx, dy): (isize, isize),
    bound: f64,
) -> f64 {
    let (h, w) = (r.height() as isize, r.width() as isize);
    let mut sad = 0.0;
    for y in ys {
        let ry = (y as isize + dy).clamp(0, h - 1) as usize;
        for x in xs.clone() {
            let rx = (x as isize + dx).clamp(0, w - 1) as usize;
            for (a, b) in q.cell(y, x).iter().zip(r.cell(ry, rx)) {
                sad += libm::fabs(a - b);
            }
        }
        if sad > bound {
            break;
        }
    }
    sad
}

/// Exhaustive block matching. Every `block × block` tile of the query gets the
/// integer displacement within `±search` minimizing the SAD against the
/// reference; ties go to the smallest displacement.
pub fn block_match_flow(query: &Image, reference: &Image, block: usize, search: usize) -> Result<FlowField> {
    if (query.height(), query.width()) != (reference.height(), reference.width()) {
        return Err(shape_err!(
            "query {}x{} and reference {}x{} differ",
            query.height(),
            query.width(),
            reference.height(),
            reference.width()
        ));
    }
    if block == 0 {
        return Err(arg_err!("block size must be at least 1"));
    }
    let (h, w) = (query.height(), query.width());
    let mut flow = Raster::zeros(h, w, 2);
    if h == 0 || w == 0 {
        return FlowField::from_raster(flow);
    }
    let (q, r) = (query.raster(), reference.raster());
    let cands = displacements(search);
    crate::par::for_each_row(flow.data_mut(), block * w * 2, |bi, rows| {
        let ys = bi * block..((bi + 1) * block).min(h);
        for bx in (0..w).step_by(block) {
            let xs = bx..(bx + block).min(w);
            let mut best = (f64::INFINITY, (0, 0));
            for &d in &cands {
                let sad = block_sad(q, r, ys.clone(), xs.clone(), d, best.0);
                if sad < best.0 {
                    best = (sad, d);
                }
            }
            let (dx, dy) = best.1;
            for y in 0..ys.len() {
                for x in xs.clone() {
                    let i = (y * w + x) * 2;
                    rows[i] = dx as f64;
                    rows[i + 1] = dy as f64;
                }
            }
        }
    });
    FlowField::from_raster(flow)
}

/// Brings an image-resolution flow to the feature grid of a stride-`stride`
/// encoder run on the padded image: pad, resize by `1 / stride`, and divide
/// the displacements by `stride`.
pub fn flow_to_feature_scale(f: &FlowField, stride: usize) -> Result<FlowField> {
    let (padded, _) = pad_to_multiple(f.raster(), stride)?;
    let (fh, fw) = (padded.height() / stride, padded.width() / stride);
    let s = stride as f64;
    let resized = bilinear_resize(&padded, fh, fw)?.map(|v| v / s);
    FlowField::from_raster(resized)
}

/// Source of query→reference flow at image resolution.
pub trait FlowProvider {
    /// Flow from frame `query_index` to frame `ref_index`.
    fn flow(&self, query_index: usize, ref_index: usize, query: &Image, reference: &Image) -> Result<FlowField>;
}

/// No motion: the vanilla matcher.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroFlow;

impl FlowProvider for ZeroFlow {
    fn flow(&self, _: usize, _: usize, query: &Image, _: &Image) -> Result<FlowField> {
        Ok(FlowField::zeros(query.height(), query.width()))
    }
}

/// The built-in [`block_match_flow`] estimator.
#[derive(Debug, Clone, Copy)]
pub struct BlockMatching {
    pub block: usize,
    pub search: usize,
}

impl Default for BlockMatching {
    fn default() -> Self {
        Self { block: 8, search: 16 }
    }
}

impl FlowProvider for BlockMatching {
    fn flow(&self, _: usize, _: usize, query: &Image, reference: &Image) -> Result<FlowField> {
        block_match_flow(query, reference, self.block, self.search)
    }
}

/// Precomputed fields keyed by `(query, reference)`, falling back to another
/// provider for missing pairs.
#[derive(Debug, Clone, Default)]
pub struct FlowOverrides<P> {
    flows: BTreeMap<(usize, usize), FlowField>,
    fallback: P,
}

impl<P: FlowProvider> FlowOverrides<P> {
    pub fn new(fallback: P) -> Self {
        Self {
            flows: BTreeMap::new(),
            fallback,
        }
    }

    pub fn insert(&mut self, query_index: usize, ref_index: usize, flow: FlowField) {
        self.flows.insert((query_index, ref_index), flow);
    }

    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }
}

impl<P: FlowProvider> FlowProvider for FlowOverrides<P> {
    fn flow(&self, query_index: usize, ref_index: usize, query: &Image, reference: &Image) -> Result<FlowField> {
        match self.flows.get(&(query_index, ref_index)) {
            Some(f) if (f.height(), f.width()) != (query.height(), query.width()) => Err(shape_err!(
                "flow {}->{} is {}x{}, frames are {}x{}",
                query_index,
                ref_index,
                f.height(),
                f.width(),
                query.height(),
                query.width()
            )),
            Some(f) => Ok(f.clone()),
            None => self.fallback.flow(query_index, ref_index, query, reference),
        }
    }
}

impl<P: FlowProvider + ?Sized> FlowProvider for &P {
    fn flow(&self, query_index: usize, ref_index: usize, query: &Image, reference: &Image) -> Result<FlowField> {
        (**self).flow(query_index, ref_index, query, reference)
    }
}
