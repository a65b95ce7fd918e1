//! Sequential mask propagation over a video.
//!
//! Frame 0's annotation is stored in the memory bank as a one-hot map at
//! feature resolution. Every later frame is encoded, matched against the
//! bank's selected references (warped by query→reference flow when motion is
//! on), upsampled, decoded by argmax, and stored back as a soft map.

use alloc::vec::Vec;

use crate::alignment::{downsample, upsample, AlignMode};
use crate::color::rgb_to_lab;
use crate::encoder::{encode, EncoderConfig, EncoderParams, FeatureMap};
use crate::error::{arg_err, shape_err};
use crate::flow::{flow_to_feature_scale, FlowProvider};
use crate::matching::{motion_aware_match, one_hot, LabelMap, RoiConfig};
use crate::memory::{MemoryBank, MemoryMode};
use crate::resample::pad_to_multiple;
use crate::{ColorSpace, FlowField, Image, IndexedMask, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentConfig {
    pub roi: RoiConfig,
    pub memory: MemoryMode,
    /// Warp references by optical flow before matching.
    pub motion: bool,
    pub align: AlignMode,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            roi: RoiConfig::INFERENCE,
            memory: MemoryMode::Both,
            motion: true,
            align: AlignMode::SizeAware,
        }
    }
}

/// Per-pixel argmax over classes, ties to the lowest class id.
pub fn decode_argmax(soft: &LabelMap) -> Result<IndexedMask> {
    let k = soft.channels();
    if k == 0 || k > 256 {
        return Err(arg_err!("cannot decode {} classes into 8-bit ids", k));
    }
    let ids = soft
        .data()
        .chunks_exact(k)
        .map(|p| {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate().skip(1) {
                if v > p[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect();
    IndexedMask::new(soft.height(), soft.width(), ids)
}

/// Number of classes (background included) of a first-frame mask whose
/// object ids are `1..=max` without gaps.
pub fn class_count(mask: &IndexedMask) -> Result<usize> {
    let mut seen = [false; 256];
    for &id in mask.ids() {
        seen[id as usize] = true;
    }
    let max = mask.max_id() as usize;
    if let Some(missing) = (1..=max).find(|&i| !seen[i]) {
        return Err(arg_err!(
            "object ids must be contiguous; id {} is missing below {}",
            missing,
            max
        ));
    }
    Ok(max + 1)
}

fn to_lab(img: &Image) -> Result<Image> {
    match img.space() {
        ColorSpace::Lab => Ok(img.clone()),
        ColorSpace::Rgb => rgb_to_lab(img),
    }
}

/// Encodes a frame after padding it to a multiple of the encoder stride.
pub fn encode_frame(img: &Image, params: &EncoderParams, enc: &EncoderConfig) -> Result<FeatureMap> {
    let lab = to_lab(img)?;
    let (padded, _) = pad_to_multiple(lab.raster(), enc.output_stride())?;
    encode(&Image::new(padded, ColorSpace::Lab)?, params, enc)
}

/// Segments `frames` given the annotation of frame 0, calling
/// `on_frame(t, mask)` as each mask is produced. Frames may be RGB or Lab;
/// the flow provider sees them as given.
pub fn segment_video_with(
    frames: &[Image],
    first_mask: &IndexedMask,
    params: &EncoderParams,
    enc: &EncoderConfig,
    cfg: &SegmentConfig,
    flow: &dyn FlowProvider,
    mut on_frame: impl FnMut(usize, &IndexedMask),
) -> Result<Vec<IndexedMask>> {
    let Some(first) = frames.first() else {
        return Err(arg_err!("no frames to segment"));
    };
    let (h, w) = (first.height(), first.width());
    if (first_mask.height(), first_mask.width()) != (h, w) {
        return Err(shape_err!(
            "mask {}x{} does not match frame {}x{}",
            first_mask.height(),
            first_mask.width(),
            h,
            w
        ));
    }
    if let Some(t) = frames.iter().position(|f| (f.height(), f.width()) != (h, w)) {
        return Err(shape_err!("frame {} differs in size from frame 0", t));
    }
    let classes = class_count(first_mask)?;
    let stride = enc.output_stride();

    let mut bank = MemoryBank::new(cfg.memory);
    let key = encode_frame(first, params, enc)?;
    let (fh, fw) = (key.height(), key.width());
    let value = downsample(&one_hot(first_mask.ids(), h, w, classes)?, cfg.align, stride, fh, fw)?;
    bank.update(0, key, value)?;

    let mut out = Vec::with_capacity(frames.len());
    out.push(first_mask.clone());
    on_frame(0, first_mask);

    for (t, frame) in frames.iter().enumerate().skip(1) {
        let query = encode_frame(frame, params, enc)?;
        let refs = bank.references(t)?;
        let mut flows = Vec::with_capacity(refs.len());
        for r in &refs {
            flows.push(if cfg.motion {
                let f = flow.flow(t, r.frame, frame, &frames[r.frame])?;
                flow_to_feature_scale(&f, stride)?
            } else {
                FlowField::zeros(fh, fw)
            });
        }
        let keys: Vec<&FeatureMap> = refs.iter().map(|r| &r.key).collect();
        let values: Vec<&LabelMap> = refs.iter().map(|r| &r.value).collect();
        let soft = motion_aware_match(&query, &keys, &values, &flows, &cfg.roi)?;
        let mask = decode_argmax(&upsample(&soft, cfg.align, stride, h, w)?)?;
        bank.update(t, query, soft)?;
        on_frame(t, &mask);
        out.push(mask);
    }
    Ok(out)
}

/// [`segment_video_with`] without a progress callback.
pub fn segment_video(
    frames: &[Image],
    first_mask: &IndexedMask,
    params: &EncoderParams,
    enc: &EncoderConfig,
    cfg: &SegmentConfig,
    flow: &dyn FlowProvider,
) -> Result<Vec<IndexedMask>> {
    segment_video_with(frames, first_mask, params, enc, cfg, flow, |_, _| {})
}
