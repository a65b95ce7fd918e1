//! Windowed spatio-temporal matching.
//!
//! For a query cell `i` and reference features `F_r`, the affinity is a
//! softmax of scaled dot products over the `(2r + 1)²` window around `i` in
//! every reference frame:
//!
//! ```text
//! A(i, j) = exp(<F_q(i), F_r(j)> / T) / Σ_{j' in R(i)} exp(<F_q(i), F_r(j')> / T)
//! ```
//!
//! with `T` the channel count by default. The normalization is joint across
//! all reference frames. Labels are propagated as `Σ_j A(i, j) V(j)`.
//!
//! The motion-aware variant first backward-warps every reference Key and Value
//! with the flow from the query to that reference, so the window is centered
//! on where the query cell moved from rather than on the same coordinates.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{arg_err, shape_err};
use crate::resample::backward_warp;
use crate::{FlowField, Raster, Result};

pub use crate::encoder::FeatureMap;

/// Per-class probabilities at feature resolution. During training a
/// single-channel label map carries the reconstruction target instead.
pub type LabelMap = Raster;

/// How many candidates survive top-K filtering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopK {
    All,
    K(usize),
}

impl TopK {
    fn keep(self, n: usize) -> usize {
        match self {
            TopK::All => n,
            TopK::K(k) => k.min(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiConfig {
    /// Window radius in feature cells; the window is `(2r + 1)²` cells.
    pub radius: usize,
    pub top_k: TopK,
    /// Logit divisor. `None` divides by the channel count.
    pub temperature: Option<f64>,
}

impl RoiConfig {
    /// Inference defaults: radius 12, top 36.
    pub const INFERENCE: RoiConfig = RoiConfig {
        radius: 12,
        top_k: TopK::K(36),
        temperature: None,
    };

    pub fn vanilla(radius: usize) -> Self {
        Self {
            radius,
            top_k: TopK::All,
            temperature: None,
        }
    }

    pub fn temperature_for(&self, channels: usize) -> f64 {
        self.temperature.unwrap_or(channels as f64)
    }

    fn validate(&self) -> Result<()> {
        if let TopK::K(0) = self.top_k {
            return Err(arg_err!("top_k must be at least 1"));
        }
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t > 0.0) {
                return Err(arg_err!("temperature must be positive, got {}", t));
            }
        }
        Ok(())
    }
}

/// One reference location eligible for a query cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Index into the reference list.
    pub frame: u32,
    /// Flat cell index `y * width + x` in that reference.
    pub cell: u32,
    pub weight: f64,
}

impl Candidate {
    fn order(&self) -> (u32, u32) {
        (self.frame, self.cell)
    }
}

/// Sparse affinity: for each query cell, its candidates and their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityBlock {
    query_dims: (usize, usize),
    ref_dims: (usize, usize),
    frames: usize,
    offsets: Vec<usize>,
    candidates: Vec<Candidate>,
}

impl AffinityBlock {
    /// Assembles a block from per-query candidate lists. Used by reference
    /// implementations; weights are not validated.
    pub fn from_rows(
        query_dims: (usize, usize),
        ref_dims: (usize, usize),
        frames: usize,
        rows: Vec<Vec<Candidate>>,
    ) -> Result<Self> {
        if rows.len() != query_dims.0 * query_dims.1 {
            return Err(shape_err!(
                "expected {} rows, got {}",
                query_dims.0 * query_dims.1,
                rows.len()
            ));
        }
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut candidates = Vec::new();
        for row in rows {
            candidates.extend(row);
            offsets.push(candidates.len());
        }
        Ok(Self {
            query_dims,
            ref_dims,
            frames,
            offsets,
            candidates,
        })
    }

    pub fn query_dims(&self) -> (usize, usize) {
        self.query_dims
    }

    pub fn ref_dims(&self) -> (usize, usize) {
        self.ref_dims
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn num_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Candidates of query cell `i` (flat index).
    pub fn row(&self, i: usize) -> &[Candidate] {
        &self.candidates[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Candidate]> + '_ {
        (0..self.num_queries()).map(move |i| self.row(i))
    }
}

fn check_features(query: &FeatureMap, refs: &[&FeatureMap]) -> Result<()> {
    if refs.is_empty() {
        return Err(arg_err!("at least one reference frame is required"));
    }
    for r in refs {
        if r.dims() != query.dims() {
            return Err(shape_err!(
                "reference features {:?} do not match query {:?}",
                r.dims(),
                query.dims()
            ));
        }
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
fn window(center: usize, radius: usize, len: usize) -> core::ops::Range<usize> {
    center.saturating_sub(radius)..(center + radius + 1).min(len)
}

/// Writes the scaled logits of every window candidate of query cell `(y, x)`
/// into `out`, ordered by frame, then row-major cell index.
fn window_logits(
    query: &FeatureMap,
    refs: &[&FeatureMap],
    y: usize,
    x: usize,
    radius: usize,
    inv_t: f64,
    out: &mut Vec<Candidate>,
) {
    out.clear();
    let (h, w, _) = query.dims();
    let q = query.cell(y, x);
    for (f, r) in refs.iter().enumerate() {
        for ry in window(y, radius, h) {
            for rx in window(x, radius, w) {
                let cell = ry * w + rx;
                out.push(Candidate {
                    frame: f as u32,
                    cell: cell as u32,
                    weight: dot(q, r.cell_at(cell)) * inv_t,
                });
            }
        }
    }
}

/// In-place softmax over the `weight` field (which holds logits on entry).
fn softmax(cands: &mut [Candidate]) {
    let max = cands.iter().map(|c| c.weight).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for c in cands.iter_mut() {
        c.weight = libm::exp(c.weight - max);
        z += c.weight;
    }
    for c in cands.iter_mut() {
        c.weight /= z;
    }
}

/// Descending weight, ties to the lowest `(frame, cell)`.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.weight.total_cmp(&a.weight).then_with(|| a.order().cmp(&b.order()))
}

/// Keeps the `keep` best candidates, restored to `(frame, cell)` order.
fn retain_top(cands: &mut Vec<Candidate>, keep: usize) {
    if keep >= cands.len() {
        return;
    }
    cands.select_nth_unstable_by(keep - 1, rank);
    cands.truncate(keep);
    cands.sort_unstable_by_key(Candidate::order);
}

/// Softmax-normalized window affinity between `query` and every reference.
pub fn local_affinity(query: &FeatureMap, refs: &[&FeatureMap], cfg: &RoiConfig) -> Result<AffinityBlock> {
    check_features(query, refs)?;
    cfg.validate()?;
    let (h, w, c) = query.dims();
    let inv_t = 1.0 / cfg.temperature_for(c);
    let mut offsets = Vec::with_capacity(h * w + 1);
    offsets.push(0);
    let mut candidates = Vec::new();
    let mut scratch = Vec::new();
    for y in 0..h {
        for x in 0..w {
            window_logits(query, refs, y, x, cfg.radius, inv_t, &mut scratch);
            softmax(&mut scratch);
            candidates.extend_from_slice(&scratch);
            offsets.push(candidates.len());
        }
    }
    Ok(AffinityBlock {
        query_dims: (h, w),
        ref_dims: (h, w),
        frames: refs.len(),
        offsets,
        candidates,
    })
}

/// Keeps the `k` largest weights per query cell (ties to the lowest
/// `(frame, cell)`) and renormalizes them to sum to one.
pub fn topk_filter(block: &AffinityBlock, k: TopK) -> Result<AffinityBlock> {
    if let TopK::K(0) = k {
        return Err(arg_err!("top_k must be at least 1"));
    }
    let mut rows = Vec::with_capacity(block.num_queries());
    for row in block.rows() {
        let mut kept = row.to_vec();
        let keep = k.keep(kept.len());
        if keep < kept.len() {
            retain_top(&mut kept, keep);
            let z: f64 = kept.iter().map(|c| c.weight).sum();
            for c in &mut kept {
                c.weight /= z;
            }
        }
        rows.push(kept);
    }
    AffinityBlock::from_rows(block.query_dims, block.ref_dims, block.frames, rows)
}

fn check_values(block: &AffinityBlock, values: &[&LabelMap]) -> Result<usize> {
    if values.len() != block.frames {
        return Err(arg_err!(
            "affinity covers {} reference frames but {} value maps were given",
            block.frames,
            values.len()
        ));
    }
    let k = values.first().map_or(0, |v| v.channels());
    for v in values {
        if (v.height(), v.width()) != block.ref_dims || v.channels() != k {
            return Err(shape_err!(
                "value map {:?} does not match reference {:?}x{}",
                v.dims(),
                block.ref_dims,
                k
            ));
        }
    }
    Ok(k)
}

/// `out(i) = Σ_j A(i, j) · V_frame(j)(cell(j))`
pub fn propagate_labels(block: &AffinityBlock, values: &[&LabelMap]) -> Result<LabelMap> {
    let k = check_values(block, values)?;
    let (h, w) = block.query_dims;
    let mut out = Raster::zeros(h, w, k);
    for (i, acc) in out.data_mut().chunks_exact_mut(k.max(1)).enumerate().take(h * w) {
        for c in block.row(i) {
            let v = values[c.frame as usize].cell_at(c.cell as usize);
            for (o, &x) in acc.iter_mut().zip(v) {
                *o += c.weight * x;
            }
        }
    }
    Ok(out)
}

/// Fused window matching: affinity, top-K and propagation per query cell
/// without materializing the full affinity block.
///
/// Equivalent to `propagate_labels(topk_filter(local_affinity(..)))` up to
/// rounding; the softmax is taken over the kept logits directly.
pub fn match_local(
    query: &FeatureMap,
    keys: &[&FeatureMap],
    values: &[&LabelMap],
    cfg: &RoiConfig,
) -> Result<LabelMap> {
    check_features(query, keys)?;
    cfg.validate()?;
    if values.len() != keys.len() {
        return Err(arg_err!("{} keys but {} values", keys.len(), values.len()));
    }
    let (h, w, c) = query.dims();
    let k = values[0].channels();
    for v in values {
        if v.dims() != (h, w, k) {
            return Err(shape_err!(
                "value map {:?} does not match keys {}x{}x{}",
                v.dims(),
                h,
                w,
                k
            ));
        }
    }
    let inv_t = 1.0 / cfg.temperature_for(c);
    let mut out = Raster::zeros(h, w, k);
    if k == 0 {
        return Ok(out);
    }
    crate::par::for_each_row(out.data_mut(), w * k, |y, row| {
        let mut scratch = Vec::new();
        for (x, acc) in row.chunks_exact_mut(k).enumerate() {
            window_logits(query, keys, y, x, cfg.radius, inv_t, &mut scratch);
            let keep = cfg.top_k.keep(scratch.len());
            retain_top(&mut scratch, keep);
            softmax(&mut scratch);
            for cand in &scratch {
                let v = values[cand.frame as usize].cell_at(cand.cell as usize);
                for (o, &x) in acc.iter_mut().zip(v) {
                    *o += cand.weight * x;
                }
            }
        }
    });
    Ok(out)
}

/// Motion-aware matching: warps each reference Key and Value with the flow
/// from the query to that reference, then runs [`match_local`].
///
/// `flows` must be at feature resolution with displacements in feature cells.
/// All-zero flows skip the warp, which is an exact identity anyway.
pub fn motion_aware_match(
    query: &FeatureMap,
    keys: &[&FeatureMap],
    values: &[&LabelMap],
    flows: &[FlowField],
    cfg: &RoiConfig,
) -> Result<LabelMap> {
    if flows.len() != keys.len() || values.len() != keys.len() {
        return Err(arg_err!(
            "{} keys, {} values and {} flows must agree",
            keys.len(),
            values.len(),
            flows.len()
        ));
    }
    let mut warped_keys = Vec::with_capacity(keys.len());
    let mut warped_values = Vec::with_capacity(keys.len());
    for ((key, value), flow) in keys.iter().zip(values).zip(flows) {
        if flow.is_zero() {
            warped_keys.push(None);
            warped_values.push(None);
        } else {
            warped_keys.push(Some(backward_warp(key, flow)?));
            warped_values.push(Some(backward_warp(value, flow)?));
        }
    }
    let keys: Vec<&FeatureMap> = warped_keys
        .iter()
        .zip(keys)
        .map(|(w, k)| w.as_ref().unwrap_or(k))
        .collect();
    let values: Vec<&LabelMap> = warped_values
        .iter()
        .zip(values)
        .map(|(w, v)| w.as_ref().unwrap_or(v))
        .collect();
    match_local(query, &keys, &values, cfg)
}

/// Gradients of a scalar loss through [`local_affinity`] and
/// [`propagate_labels`], given `∂loss/∂output`.
#[derive(Debug, Clone)]
pub struct MatchGrads {
    pub query: FeatureMap,
    pub refs: Vec<FeatureMap>,
}

/// Reverse pass of `propagate_labels(local_affinity(query, refs), values)`
/// with respect to the features. Values are treated as constants.
pub fn match_backward(
    block: &AffinityBlock,
    query: &FeatureMap,
    refs: &[&FeatureMap],
    values: &[&LabelMap],
    temperature: f64,
    grad_out: &LabelMap,
) -> Result<MatchGrads> {
    check_features(query, refs)?;
    let k = check_values(block, values)?;
    if grad_out.dims() != (block.query_dims.0, block.query_dims.1, k) {
        return Err(shape_err!("output gradient has the wrong shape"));
    }
    let c = query.channels();
    let inv_t = 1.0 / temperature;
    let mut gq = Raster::zeros(query.height(), query.width(), c);
    let mut gr: Vec<Raster> = refs.iter().map(|r| Raster::zeros(r.height(), r.width(), c)).collect();
    let mut dlogit = Vec::new();
    for i in 0..block.num_queries() {
        let row = block.row(i);
        let g = grad_out.cell_at(i);
        // ∂L/∂A(i, j) = <g_i, V_j>, then through the softmax.
        dlogit.clear();
        dlogit.extend(
            row.iter()
                .map(|cand| dot(g, values[cand.frame as usize].cell_at(cand.cell as usize))),
        );
        let mean: f64 = row.iter().zip(&dlogit).map(|(cand, d)| cand.weight * d).sum();
        let q = query.cell_at(i).to_vec();
        let gq_i = &mut gq.data_mut()[i * c..(i + 1) * c];
        for (cand, d) in row.iter().zip(&dlogit) {
            let ds = cand.weight * (d - mean) * inv_t;
            if ds == 0.0 {
                continue;
            }
            let j = cand.cell as usize;
            let rf = refs[cand.frame as usize].cell_at(j);
            for (o, &v) in gq_i.iter_mut().zip(rf) {
                *o += ds * v;
            }
            let gr_j = &mut gr[cand.frame as usize].data_mut()[j * c..(j + 1) * c];
            for (o, &v) in gr_j.iter_mut().zip(&q) {
                *o += ds * v;
            }
        }
    }
    Ok(MatchGrads { query: gq, refs: gr })
}

/// Largest deviation of any cell's channel sum from one.
pub fn simplex_error(labels: &LabelMap) -> f64 {
    let k = labels.channels();
    if k == 0 {
        return 0.0;
    }
    labels
        .data()
        .chunks_exact(k)
        .map(|cell| libm::fabs(cell.iter().sum::<f64>() - 1.0))
        .fold(0.0, f64::max)
}

/// One-hot encodes an object-id map into `classes` channels.
pub fn one_hot(ids: &[u8], height: usize, width: usize, classes: usize) -> Result<LabelMap> {
    if ids.len() != height * width {
        return Err(shape_err!("id map has {} entries for {}x{}", ids.len(), height, width));
    }
    let mut out = Raster::zeros(height, width, classes);
    for (i, &id) in ids.iter().enumerate() {
        let id = id as usize;
        if id >= classes {
            return Err(arg_err!("object id {} outside {} classes", id, classes));
        }
        out.data_mut()[i * classes + id] = 1.0;
    }
    Ok(out)
}

#[doc(hidden)]
pub fn rows_sum_to_one(block: &AffinityBlock) -> f64 {
    block
        .rows()
        .map(|r| libm::fabs(r.iter().map(|c| c.weight).sum::<f64>() - 1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> Raster {
        Raster::from_fn(h, w, c, |_, _, _| rng.random_range(-1.5..1.5))
    }

    fn random_labels(h: usize, w: usize, k: usize, rng: &mut ChaCha8Rng) -> Raster {
        let mut r = Raster::from_fn(h, w, k, |_, _, _| rng.random_range(0.01..1.0));
        for cell in r.data_mut().chunks_exact_mut(k) {
            let s: f64 = cell.iter().sum();
            cell.iter_mut().for_each(|v| *v /= s);
        }
        r
    }

    #[test]
    fn uniform_window_gives_uniform_weights() {
        let q = Raster::filled(5, 5, 3, 0.4);
        let r = Raster::filled(5, 5, 3, 0.7);
        let a = local_affinity(&q, &[&r], &RoiConfig::vanilla(1)).unwrap();
        let center = a.row(2 * 5 + 2);
        assert_eq!(center.len(), 9);
        for c in center {
            assert!((c.weight - 1.0 / 9.0).abs() < 1e-15);
        }
        // corners clip their window
        assert_eq!(a.row(0).len(), 4);
    }

    #[test]
    fn duplicated_reference_halves_the_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random_map(4, 4, 3, &mut rng);
        let r = random_map(4, 4, 3, &mut rng);
        let cfg = RoiConfig::vanilla(1);
        let single = local_affinity(&q, &[&r], &cfg).unwrap();
        let double = local_affinity(&q, &[&r, &r], &cfg).unwrap();
        for i in 0..16 {
            let (s, d) = (single.row(i), double.row(i));
            assert_eq!(d.len(), 2 * s.len());
            for (k, c) in s.iter().enumerate() {
                assert!((d[k].weight - c.weight / 2.0).abs() < 1e-15);
                assert!((d[k + s.len()].weight - c.weight / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_candidate_case_by_hand() {
        // c = 2, query (1, 0); the window of cell 0 with r = 1 on a 1x2 map
        // holds (1, 0) and (0, 1): logits 1/2 and 0.
        let q = Raster::new(1, 2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let r = Raster::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = local_affinity(&q, &[&r], &RoiConfig::vanilla(1)).unwrap();
        let e = 0.5f64.exp();
        let z = e + 1.0;
        let row = a.row(0);
        assert!((row[0].weight - e / z).abs() < 1e-15);
        assert!((row[1].weight - 1.0 / z).abs() < 1e-15);
    }

    #[test]
    fn errors_on_bad_inputs() {
        let q = Raster::zeros(3, 3, 2);
        assert!(local_affinity(&q, &[], &RoiConfig::vanilla(1)).is_err());
        let r = Raster::zeros(3, 4, 2);
        assert!(local_affinity(&q, &[&r], &RoiConfig::vanilla(1)).is_err());
        let a = local_affinity(&q, &[&q], &RoiConfig::vanilla(1)).unwrap();
        let v = Raster::zeros(3, 3, 2);
        assert!(propagate_labels(&a, &[&v, &v]).is_err());
        assert!(motion_aware_match(&q, &[&q], &[&v], &[], &RoiConfig::vanilla(1)).is_err());
    }

    #[test]
    fn topk_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_map(5, 5, 4, &mut rng);
        let r = random_map(5, 5, 4, &mut rng);
        let a = local_affinity(&q, &[&r], &RoiConfig::vanilla(2)).unwrap();
        assert_eq!(topk_filter(&a, TopK::All).unwrap(), a);
        assert_eq!(topk_filter(&a, TopK::K(25)).unwrap(), a);
        let one = topk_filter(&a, TopK::K(1)).unwrap();
        for i in 0..25 {
            let best = a.row(i).iter().copied().min_by(rank).unwrap();
            assert_eq!(one.row(i), &[Candidate { weight: 1.0, ..best }]);
        }
        assert!(topk_filter(&a, TopK::K(0)).is_err());
    }

    #[test]
    fn topk_breaks_ties_toward_lowest_index() {
        let q = Raster::filled(3, 3, 1, 1.0);
        let r = Raster::filled(3, 3, 1, 1.0);
        let a = local_affinity(&q, &[&r, &r], &RoiConfig::vanilla(1)).unwrap();
        let kept = topk_filter(&a, TopK::K(2)).unwrap();
        let row = kept.row(4);
        assert_eq!((row[0].frame, row[0].cell), (0, 0));
        assert_eq!((row[1].frame, row[1].cell), (0, 1));
        assert!((row[0].weight - 0.5).abs() < 1e-15);
    }

    #[test]
    fn thirty_six_of_3125() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_map(25, 25, 2, &mut rng);
        let refs: Vec<Raster> = (0..5).map(|_| random_map(25, 25, 2, &mut rng)).collect();
        let refs: Vec<&Raster> = refs.iter().collect();
        let a = local_affinity(&q, &refs, &RoiConfig::vanilla(12)).unwrap();
        let center = 12 * 25 + 12;
        assert_eq!(a.row(center).len(), 3125);
        let kept = topk_filter(&a, TopK::K(36)).unwrap();
        assert_eq!(kept.row(center).len(), 36);
        assert!(rows_sum_to_one(&kept) < 1e-12);
    }

    #[test]
    fn propagation_by_hand() {
        let block = AffinityBlock::from_rows(
            (1, 1),
            (1, 2),
            1,
            vec![vec![
                Candidate {
                    frame: 0,
                    cell: 0,
                    weight: 0.25,
                },
                Candidate {
                    frame: 0,
                    cell: 1,
                    weight: 0.75,
                },
            ]],
        )
        .unwrap();
        let v = Raster::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = propagate_labels(&block, &[&v]).unwrap();
        assert_eq!(out.data(), &[0.25, 0.75]);

        let copy = AffinityBlock::from_rows(
            (1, 1),
            (1, 2),
            1,
            vec![vec![Candidate {
                frame: 0,
                cell: 1,
                weight: 1.0,
            }]],
        )
        .unwrap();
        assert_eq!(propagate_labels(&copy, &[&v]).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn constant_one_hot_values_propagate_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_map(6, 6, 3, &mut rng);
        let r = random_map(6, 6, 3, &mut rng);
        let v = Raster::from_fn(6, 6, 3, |_, _, c| if c == 2 { 1.0 } else { 0.0 });
        let a = local_affinity(&q, &[&r], &RoiConfig::vanilla(2)).unwrap();
        let out = propagate_labels(&a, &[&v]).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn fused_path_matches_the_three_step_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (radius, top_k) in [(0, TopK::All), (1, TopK::K(3)), (2, TopK::K(9)), (3, TopK::All)] {
            let q = random_map(7, 9, 4, &mut rng);
            let keys: Vec<Raster> = (0..3).map(|_| random_map(7, 9, 4, &mut rng)).collect();
            let vals: Vec<Raster> = (0..3).map(|_| random_labels(7, 9, 3, &mut rng)).collect();
            let keys: Vec<&Raster> = keys.iter().collect();
            let vals: Vec<&Raster> = vals.iter().collect();
            let cfg = RoiConfig {
                radius,
                top_k,
                temperature: None,
            };
            let a = topk_filter(&local_affinity(&q, &keys, &cfg).unwrap(), top_k).unwrap();
            let slow = propagate_labels(&a, &vals).unwrap();
            let fast = match_local(&q, &keys, &vals, &cfg).unwrap();
            assert!(slow.max_abs_diff(&fast) < 1e-12);
            assert!(simplex_error(&fast) < 1e-12);
        }
    }

    #[test]
    fn zero_flow_is_bitwise_vanilla() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random_map(8, 8, 4, &mut rng);
        let k = random_map(8, 8, 4, &mut rng);
        let v = random_labels(8, 8, 2, &mut rng);
        let cfg = RoiConfig {
            radius: 2,
            top_k: TopK::K(5),
            temperature: None,
        };
        let vanilla = match_local(&q, &[&k], &[&v], &cfg).unwrap();
        let motion = motion_aware_match(&q, &[&k], &[&v], &[FlowField::zeros(8, 8)], &cfg).unwrap();
        assert_eq!(vanilla.data(), motion.data());
    }

    #[test]
    fn exact_flow_recovers_a_translated_mask() {
        // Reference = query shifted left by 2 cells (8 px at stride 4); the
        // query->reference flow is -2 on every cell that has a source.
        let (h, w) = (8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let big = random_map(h, w + 2, 4, &mut rng);
        let query = Raster::from_fn(h, w, 4, |y, x, c| big.get(y, x + 2, c) * 4.0);
        let key = Raster::from_fn(h, w, 4, |y, x, c| big.get(y, (x + 4).min(w + 1), c) * 4.0);
        let ids = |x: usize| if (5..9).contains(&x) { 1.0 } else { 0.0 };
        let query_mask = Raster::from_fn(h, w, 2, |_, x, c| if c == 1 { ids(x) } else { 1.0 - ids(x) });
        let value = Raster::from_fn(h, w, 2, |_, x, c| {
            let f = ids((x + 2).min(w - 1));
            if c == 1 {
                f
            } else {
                1.0 - f
            }
        });
        let flow = FlowField::constant(h, w, -2.0, 0.0);
        let cfg = RoiConfig {
            radius: 0,
            top_k: TopK::All,
            temperature: None,
        };
        let out = motion_aware_match(&query, &[&key], &[&value], &[flow], &cfg).unwrap();
        for y in 0..h {
            for x in 2..w {
                assert_eq!(out.cell(y, x), query_mask.cell(y, x), "({y}, {x})");
            }
        }
    }

    #[test]
    fn match_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = random_map(2, 2, 3, &mut rng);
        let r = random_map(2, 2, 3, &mut rng);
        let v = random_map(2, 2, 1, &mut rng);
        let g = random_map(2, 2, 1, &mut rng);
        let cfg = RoiConfig::vanilla(1);
        let loss = |q: &Raster, r: &Raster| {
            let a = local_affinity(q, &[r], &cfg).unwrap();
            let out = propagate_labels(&a, &[&v]).unwrap();
            out.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let a = local_affinity(&q, &[&r], &cfg).unwrap();
        let grads = match_backward(&a, &q, &[&r], &[&v], 3.0, &g).unwrap();
        let h = 1e-6;
        for idx in 0..q.data().len() {
            let mut qp = q.clone();
            qp.data_mut()[idx] += h;
            let mut qm = q.clone();
            qm.data_mut()[idx] -= h;
            let fd = (loss(&qp, &r) - loss(&qm, &r)) / (2.0 * h);
            assert!((fd - grads.query.data()[idx]).abs() < 1e-8);
            let mut rp = r.clone();
            rp.data_mut()[idx] += h;
            let mut rm = r.clone();
            rm.data_mut()[idx] -= h;
            let fd = (loss(&q, &rp) - loss(&q, &rm)) / (2.0 * h);
            assert!((fd - grads.refs[0].data()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn scaling_features_keeps_the_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_map(6, 6, 4, &mut rng);
        let r = random_map(6, 6, 4, &mut rng);
        let cfg = RoiConfig::vanilla(2);
        let best = |s: f64| {
            let a = local_affinity(&q.map(|v| v * s), &[&r.map(|v| v * s)], &cfg).unwrap();
            topk_filter(&a, TopK::K(1)).unwrap()
        };
        let base = best(1.0);
        for s in [0.5, 2.0, 3.0] {
            let other = best(s);
            for i in 0..36 {
                assert_eq!(base.row(i)[0].order(), other.row(i)[0].order());
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn affinity_matches_oracle(seed in 0u64..10_000, h in 1usize..=8, w in 1usize..=8, c in 1usize..=4, radius in 0usize..=2, frames in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_map(h, w, c, &mut rng);
            let refs: Vec<Raster> = (0..frames).map(|_| random_map(h, w, c, &mut rng)).collect();
            let refs: Vec<&Raster> = refs.iter().collect();
            let cfg = RoiConfig::vanilla(radius);
            let fast = local_affinity(&q, &refs, &cfg).unwrap();
            let slow = oracle::naive_local_affinity(&q, &refs, &cfg).unwrap();
            prop_assert!(oracle::max_weight_diff(&fast, &slow) < 1e-12);
            prop_assert!(rows_sum_to_one(&fast) < 1e-12);
            prop_assert!(rows_sum_to_one(&topk_filter(&fast, TopK::K(3)).unwrap()) < 1e-12);
        }

        #[test]
        fn propagation_stays_on_the_simplex(seed in 0u64..10_000, k in 1usize..=4, top in 1usize..=20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_map(6, 5, 3, &mut rng);
            let keys = [random_map(6, 5, 3, &mut rng), random_map(6, 5, 3, &mut rng)];
            let vals = [random_labels(6, 5, k, &mut rng), random_labels(6, 5, k, &mut rng)];
            let cfg = RoiConfig { radius: 2, top_k: TopK::K(top), temperature: None };
            let out = match_local(&q, &[&keys[0], &keys[1]], &[&vals[0], &vals[1]], &cfg).unwrap();
            prop_assert!(simplex_error(&out) < 1e-12);
            prop_assert!(out.data().iter().all(|&v| (-1e-15..=1.0 + 1e-12).contains(&v)));
        }
    }
}
