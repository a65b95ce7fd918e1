//! Region similarity J, contour accuracy F and the generalization gap.
//!
//! F follows the DAVIS benchmark: boundaries are extracted with `seg2bmap`,
//! dilated by a disk of radius `ceil(0.008 · diagonal)`, and matched
//! one-sidedly in each direction.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::{IndexedMask, Result};

/// A `height × width` boolean mask, row-major.
#[derive(Debug, Clone, Copy)]
pub struct BinaryView<'a> {
    pub height: usize,
    pub width: usize,
    pub data: &'a [bool],
}

impl<'a> BinaryView<'a> {
    pub fn new(height: usize, width: usize, data: &'a [bool]) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!("{}x{} mask has {} pixels", height, width, data.len()));
        }
        Ok(Self { height, width, data })
    }

    fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }
}

fn check_pair(a: &BinaryView<'_>, b: &BinaryView<'_>) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(shape_err!(
            "masks {}x{} and {}x{} differ",
            a.height,
            a.width,
            b.height,
            b.width
        ));
    }
    Ok(())
}

/// Intersection over union; two empty masks score 1.
pub fn region_j(pred: BinaryView<'_>, gt: BinaryView<'_>) -> Result<f64> {
    check_pair(&pred, &gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(gt.data) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Boundary map: a pixel is on the boundary when it differs from its east,
/// south or south-east neighbor (missing neighbors count as background).
pub fn boundary_map(m: BinaryView<'_>) -> Vec<bool> {
    let (h, w) = (m.height, m.width);
    let mut b = vec![false; h * w];
    if h == 0 || w == 0 {
        return b;
    }
    let get = |y: usize, x: usize| y < h && x < w && m.at(y, x);
    for y in 0..h {
        for x in 0..w {
            let s = m.at(y, x);
            b[y * w + x] = (s ^ get(y, x + 1)) | (s ^ get(y + 1, x)) | (s ^ get(y + 1, x + 1));
        }
    }
    for x in 0..w {
        b[(h - 1) * w + x] = m.at(h - 1, x) ^ get(h - 1, x + 1);
    }
    for y in 0..h {
        b[y * w + w - 1] = m.at(y, w - 1) ^ get(y + 1, w - 1);
    }
    b[h * w - 1] = false;
    b
}

/// Dilation by the disk `dx² + dy² ≤ r²`.
fn dilate(b: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let ri = r as isize;
    let offsets: Vec<(isize, isize)> = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| dx * dx + dy * dy <= ri * ri)
        .collect();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !b[y * w + x] {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    out
}

/// Default boundary tolerance in pixels: 0.8% of the diagonal, rounded up.
pub fn boundary_tolerance(height: usize, width: usize) -> usize {
    libm::ceil(0.008 * libm::hypot(height as f64, width as f64)) as usize
}

/// Boundary precision and recall of `pred` against `gt`.
pub fn boundary_precision_recall(pred: BinaryView<'_>, gt: BinaryView<'_>, tol: usize) -> Result<(f64, f64)> {
    check_pair(&pred, &gt)?;
    let (h, w) = (pred.height, pred.width);
    let pb = boundary_map(pred);
    let gb = boundary_map(gt);
    let (np, ng) = (pb.iter().filter(|&&v| v).count(), gb.iter().filter(|&&v| v).count());
    Ok(match (np, ng) {
        (0, 0) => (1.0, 1.0),
        (0, _) => (1.0, 0.0),
        (_, 0) => (0.0, 1.0),
        _ => {
            let pd = dilate(&pb, h, w, tol);
            let gd = dilate(&gb, h, w, tol);
            let pm = pb.iter().zip(&gd).filter(|(&p, &g)| p && g).count();
            let gm = gb.iter().zip(&pd).filter(|(&g, &p)| g && p).count();
            (pm as f64 / np as f64, gm as f64 / ng as f64)
        }
    })
}

/// Boundary F-measure within `tol` pixels (`None` uses
/// [`boundary_tolerance`]).
pub fn contour_f(pred: BinaryView<'_>, gt: BinaryView<'_>, tol: Option<usize>) -> Result<f64> {
    let tol = tol.unwrap_or_else(|| boundary_tolerance(pred.height, pred.width));
    let (p, r) = boundary_precision_recall(pred, gt, tol)?;
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Mean seen-category score minus mean unseen-category score.
pub fn generalization_gap(seen_j: f64, seen_f: f64, unseen_j: f64, unseen_f: f64) -> f64 {
    (seen_j + seen_f) / 2.0 - (unseen_j + unseen_f) / 2.0
}

/// Per-object scores over a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectScore {
    pub object: u8,
    pub mean_j: f64,
    pub mean_f: f64,
}

impl ObjectScore {
    pub fn j_and_f(&self) -> f64 {
        (self.mean_j + self.mean_f) / 2.0
    }
}

/// Scores every object present in the ground truth over frames `1..`; the
/// first frame is the given annotation and is not scored.
pub fn evaluate_sequence(preds: &[IndexedMask], gts: &[IndexedMask]) -> Result<Vec<ObjectScore>> {
    if preds.len() != gts.len() {
        return Err(shape_err!(
            "{} predicted frames for {} ground-truth frames",
            preds.len(),
            gts.len()
        ));
    }
    let objects: BTreeSet<u8> = gts
        .iter()
        .flat_map(|g| g.ids().iter().copied())
        .filter(|&id| id != 0)
        .collect();
    let scored = if gts.len() > 1 { 1 } else { 0 };
    let n = (gts.len() - scored).max(1) as f64;
    let mut out = Vec::with_capacity(objects.len());
    for id in objects {
        let (mut j, mut f) = (0.0, 0.0);
        for (p, g) in preds.iter().zip(gts).skip(scored) {
            let (pb, gb) = (p.binary(id), g.binary(id));
            let pv = BinaryView::new(p.height(), p.width(), &pb)?;
            let gv = BinaryView::new(g.height(), g.width(), &gb)?;
            j += region_j(pv, gv)?;
            f += contour_f(pv, gv, None)?;
        }
        out.push(ObjectScore {
            object: id,
            mean_j: j / n,
            mean_f: f / n,
        });
    }
    Ok(out)
}
