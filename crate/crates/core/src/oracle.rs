//! Brute-force references and synthetic videos with known geometry.
//!
//! Nothing here calls into the production matcher; the affinity oracles use
//! their own loops and their own softmax so they can be trusted as
//! independent evidence. Meant for small instances only.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, shape_err};
use crate::matching::{AffinityBlock, Candidate, FeatureMap, RoiConfig};
use crate::{ColorSpace, FlowField, Image, IndexedMask, Raster, Result};

fn check(query: &FeatureMap, refs: &[&FeatureMap]) -> Result<()> {
    if refs.is_empty() {
        return Err(arg_err!("no reference frames"));
    }
    if refs.iter().any(|r| r.dims() != query.dims()) {
        return Err(shape_err!("reference and query features differ in shape"));
    }
    Ok(())
}

/// Scores every reference cell accepted by `keep(dy, dx)` against every
/// query cell and normalizes with a two-pass exponent sum.
fn brute_force(
    query: &FeatureMap,
    refs: &[&FeatureMap],
    divisor: f64,
    keep: impl Fn(isize, isize) -> bool,
) -> Result<AffinityBlock> {
    check(query, refs)?;
    let (h, w, c) = query.dims();
    let mut rows = Vec::with_capacity(h * w);
    for qy in 0..h {
        for qx in 0..w {
            let mut row = Vec::new();
            for (f, r) in refs.iter().enumerate() {
                for ry in 0..h {
                    for rx in 0..w {
                        if !keep(ry as isize - qy as isize, rx as isize - qx as isize) {
                            continue;
                        }
                        let mut s = 0.0;
                        for k in 0..c {
                            s += query.get(qy, qx, k) * r.get(ry, rx, k);
                        }
                        row.push(Candidate {
                            frame: f as u32,
                            cell: (ry * w + rx) as u32,
                            weight: s / divisor,
                        });
                    }
                }
            }
            let mut top = f64::NEG_INFINITY;
            for cand in &row {
                if cand.weight > top {
                    top = cand.weight;
                }
            }
            let mut z = 0.0;
            for cand in &row {
                z += libm::exp(cand.weight - top);
            }
            for cand in &mut row {
                cand.weight = libm::exp(cand.weight - top) / z;
            }
            rows.push(row);
        }
    }
    AffinityBlock::from_rows((h, w), (h, w), refs.len(), rows)
}

/// Windowed affinity evaluated literally: every reference cell within
/// Chebyshev distance `r` of the query cell, in every reference frame.
pub fn naive_local_affinity(query: &FeatureMap, refs: &[&FeatureMap], cfg: &RoiConfig) -> Result<AffinityBlock> {
    let r = cfg.radius as isize;
    let divisor = cfg.temperature.unwrap_or(query.channels() as f64);
    brute_force(query, refs, divisor, |dy, dx| dy.abs() <= r && dx.abs() <= r)
}

/// Softmax over every cell of every reference frame.
pub fn naive_nonlocal_affinity(query: &FeatureMap, refs: &[&FeatureMap], divisor: f64) -> Result<AffinityBlock> {
    brute_force(query, refs, divisor, |_, _| true)
}

/// Highest-weight `(frame, cell)` of each query row, first one on ties.
pub fn naive_argmax(block: &AffinityBlock) -> Vec<(u32, u32)> {
    let mut out = Vec::with_capacity(block.num_queries());
    for i in 0..block.num_queries() {
        let mut best: Option<Candidate> = None;
        for &c in block.row(i) {
            let better = match best {
                None => true,
                Some(b) => c.weight > b.weight || (c.weight == b.weight && (c.frame, c.cell) < (b.frame, b.cell)),
            };
            if better {
                best = Some(c);
            }
        }
        out.push(best.map_or((u32::MAX, u32::MAX), |b| (b.frame, b.cell)));
    }
    out
}

/// Largest weight difference between two blocks with identical candidate
/// lists; infinite if the lists differ.
pub fn max_weight_diff(a: &AffinityBlock, b: &AffinityBlock) -> f64 {
    if a.num_queries() != b.num_queries() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for i in 0..a.num_queries() {
        let (ra, rb) = (a.row(i), b.row(i));
        if ra.len() != rb.len() {
            return f64::INFINITY;
        }
        for (x, y) in ra.iter().zip(rb) {
            if (x.frame, x.cell) != (y.frame, y.cell) {
                return f64::INFINITY;
            }
            worst = worst.max(libm::fabs(x.weight - y.weight));
        }
    }
    worst
}

/// A textured square sliding over a static textured background, wrapping
/// around the frame edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquareSpec {
    pub frames: usize,
    /// Frame height and width in pixels.
    pub size: usize,
    /// Square side in pixels.
    pub side: usize,
    /// Top-left corner in frame 0.
    pub start: (usize, usize),
    /// Displacement `(dx, dy)` per frame in pixels.
    pub velocity: (isize, isize),
    pub seed: u64,
}

impl Default for SquareSpec {
    fn default() -> Self {
        Self {
            frames: 24,
            size: 128,
            side: 32,
            start: (16, 48),
            velocity: (10, 0),
            seed: 0,
        }
    }
}

/// Frames, ground-truth masks (square = object 1) and exact flows.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub square: SquareSpec,
    pub frames: Vec<Image>,
    pub masks: Vec<IndexedMask>,
}

fn wrap(v: isize, n: usize) -> usize {
    v.rem_euclid(n as isize) as usize
}

impl SyntheticVideo {
    /// Square-local coordinates `(u, v)` of pixel `(y, x)` in frame `t`, if
    /// the square covers it.
    pub fn square_coords(&self, t: usize, y: usize, x: usize) -> Option<(usize, usize)> {
        let s = &self.square;
        let oy = s.start.1 as isize + s.velocity.1 * t as isize;
        let ox = s.start.0 as isize + s.velocity.0 * t as isize;
        let v = wrap(y as isize - oy, s.size);
        let u = wrap(x as isize - ox, s.size);
        (u < s.side && v < s.side).then_some((u, v))
    }

    /// Exact flow from frame `q` to frame `r`: square pixels point at the
    /// same square point in `r` (taking the wrap into account), background
    /// pixels do not move.
    pub fn flow(&self, q: usize, r: usize) -> FlowField {
        let s = &self.square;
        let steps = r as isize - q as isize;
        let mut f = FlowField::zeros(s.size, s.size);
        for y in 0..s.size {
            for x in 0..s.size {
                if self.square_coords(q, y, x).is_some() {
                    let ty = wrap(y as isize + s.velocity.1 * steps, s.size);
                    let tx = wrap(x as isize + s.velocity.0 * steps, s.size);
                    f.set(y, x, tx as f64 - x as f64, ty as f64 - y as f64);
                }
            }
        }
        f
    }
}

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// Smooth-ish texture: random values on a coarse lattice, bilinearly
/// interpolated, plus per-pixel grain of amplitude `grain`.
fn texture(h: usize, w: usize, cell: usize, grain: f64, seed: u64) -> Raster {
    let (gh, gw) = (h / cell + 2, w / cell + 2);
    let lattice = noise(gh * gw * 3, seed);
    let fine = noise(h * w * 3, seed ^ 0x5eed);
    Raster::from_fn(h, w, 3, |y, x, c| {
        let (fy, fx) = (y as f64 / cell as f64, x as f64 / cell as f64);
        let (y0, x0) = (fy as usize, fx as usize);
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let at = |yy: usize, xx: usize| lattice[(yy * gw + xx) * 3 + c];
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
        let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
        (1.0 - grain) * (top * (1.0 - ty) + bottom * ty) + grain * fine[(y * w + x) * 3 + c]
    })
}

/// Renders the moving-square video. The square's colors are drawn from a
/// warmer palette than the background so the two are separable by color.
pub fn synth_moving_square(square: SquareSpec) -> Result<SyntheticVideo> {
    if square.side == 0 || square.side > square.size || square.frames == 0 {
        return Err(arg_err!("invalid square {:?}", square));
    }
    let bg = texture(square.size, square.size, 8, 0.2, square.seed);
    let fg = texture(square.side, square.side, 4, 0.2, square.seed.wrapping_add(1));
    let mut video = SyntheticVideo {
        square,
        frames: Vec::with_capacity(square.frames),
        masks: Vec::with_capacity(square.frames),
    };
    for t in 0..square.frames {
        let mut ids = vec![0u8; square.size * square.size];
        let mut r = Raster::zeros(square.size, square.size, 3);
        for y in 0..square.size {
            for x in 0..square.size {
                let px = r.cell_mut(y, x);
                match video.square_coords(t, y, x) {
                    Some((u, v)) => {
                        let tex = fg.cell(v, u);
                        px[0] = 0.55 + 0.45 * tex[0];
                        px[1] = 0.1 + 0.35 * tex[1];
                        px[2] = 0.05 + 0.25 * tex[2];
                        ids[y * square.size + x] = 1;
                    }
                    None => {
                        let tex = bg.cell(y, x);
                        px[0] = 0.05 + 0.3 * tex[0];
                        px[1] = 0.2 + 0.5 * tex[1];
                        px[2] = 0.3 + 0.6 * tex[2];
                    }
                }
            }
        }
        video.frames.push(Image::new(r, ColorSpace::Rgb)?);
        video.masks.push(IndexedMask::new(square.size, square.size, ids)?);
    }
    Ok(video)
}

/// A textured image translating by `velocity` pixels per frame with
/// wrap-around; every frame is an exact shift of the first.
pub fn synth_translating_texture(
    frames: usize,
    height: usize,
    width: usize,
    velocity: (isize, isize),
    seed: u64,
) -> Result<Vec<Image>> {
    let base = texture(height, width, 12, 0.05, seed);
    (0..frames)
        .map(|t| {
            let r = Raster::from_fn(height, width, 3, |y, x, c| {
                let sy = wrap(y as isize - velocity.1 * t as isize, height);
                let sx = wrap(x as isize - velocity.0 * t as isize, width);
                base.get(sy, sx, c)
            });
            Image::new(r, ColorSpace::Rgb)
        })
        .collect()
}
