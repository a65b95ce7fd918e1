//! Self-supervised reconstruction training.
//!
//! For a pair of frames from one video, one Lab chroma channel is zeroed in
//! both; the encoder embeds the two dropped frames, and the reference's
//! dropped channel, sampled down to feature resolution, is propagated to the
//! query through the window affinity. The result is upsampled and compared to
//! the query's true channel with a Huber loss. Gradients flow back through the
//! upsampling, the propagation, the softmax and both encoder passes; only the
//! encoder has parameters.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alignment::align_down;
use crate::color::{channel_dropout, rgb_to_lab, LabChannel};
use crate::encoder::{self, EncoderCache, EncoderConfig, EncoderParams, FeatureMap};
use crate::error::{arg_err, shape_err};
use crate::matching::{local_affinity, match_backward, propagate_labels, AffinityBlock, LabelMap, RoiConfig};
use crate::resample::{bilinear_resize, bilinear_resize_backward};
use crate::{ColorSpace, Error, Image, Raster, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Passes over the data; one pass is one pair per consecutive frame pair,
    /// grouped into batches.
    pub epochs: usize,
    /// Hard cap on the number of updates, if any.
    pub max_iterations: Option<usize>,
    /// Iterations after which the learning rate is halved.
    pub halve_at: Vec<usize>,
    pub max_gap: usize,
    /// Window radius of the training matcher, in feature cells.
    pub radius: usize,
    /// Logit divisor; `None` uses the channel count.
    pub temperature: Option<f64>,
    /// Frames are resized to `input_size × input_size`.
    pub input_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale schedule.
    pub fn full() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 24,
            epochs: 35,
            max_iterations: None,
            halve_at: vec![400_000, 600_000, 800_000, 1_000_000],
            max_gap: 2,
            radius: 6,
            temperature: None,
            input_size: 256,
            seed: 0,
        }
    }

    /// Desk-scale schedule for the toy encoder.
    pub fn toy() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 4,
            epochs: 35,
            max_iterations: Some(200),
            halve_at: vec![400_000, 600_000, 800_000, 1_000_000],
            max_gap: 2,
            radius: 6,
            temperature: None,
            input_size: 64,
            seed: 0,
        }
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(arg_err!("learning rate must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.max_gap == 0 || self.input_size == 0 {
            return Err(arg_err!("batch size, max gap and input size must be positive"));
        }
        if !self.input_size.is_multiple_of(encoder.output_stride()) {
            return Err(arg_err!(
                "input size {} is not a multiple of the encoder stride {}",
                self.input_size,
                encoder.output_stride()
            ));
        }
        Ok(())
    }

    /// Learning rate in effect at `iteration` (0-based).
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        let halvings = self.halve_at.iter().filter(|&&h| iteration >= h).count();
        self.learning_rate / (1u64 << halvings.min(63)) as f64
    }

    fn roi(&self) -> RoiConfig {
        RoiConfig {
            temperature: self.temperature,
            ..RoiConfig::vanilla(self.radius)
        }
    }
}

/// Reference and query frame indices: the gap is uniform on
/// `1..=min(max_gap, n − 1)`, then the reference is uniform among the frames
/// that leave room for it.
pub fn sample_pair_indices(n: usize, max_gap: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(arg_err!("a video needs at least two frames, got {}", n));
    }
    if max_gap == 0 {
        return Err(arg_err!("max gap must be at least 1"));
    }
    let gap = rng.random_range(1..=max_gap.min(n - 1));
    let r = rng.random_range(0..n - gap);
    Ok((r, r + gap))
}

fn resize_image(img: &Image, size: usize) -> Result<Image> {
    if (img.height(), img.width()) == (size, size) {
        return Ok(img.clone());
    }
    Image::new(bilinear_resize(img.raster(), size, size)?, img.space())
}

/// Draws `(I_r, I_q)` from `frames`, both resized to `size × size`.
pub fn sample_pair(frames: &[Image], max_gap: usize, size: usize, rng: &mut impl Rng) -> Result<(Image, Image)> {
    let (r, q) = sample_pair_indices(frames.len(), max_gap, rng)?;
    Ok((resize_image(&frames[r], size)?, resize_image(&frames[q], size)?))
}

/// Mean over pixels of the δ = 1 Huber penalty.
pub fn huber_loss(pred: &Raster, target: &Raster) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(shape_err!("prediction {:?} vs target {:?}", pred.dims(), target.dims()));
    }
    let n = pred.data().len().max(1) as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = libm::fabs(p - t);
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum();
    Ok(sum / n)
}

/// `∂ huber_loss / ∂ pred`.
pub fn huber_grad(pred: &Raster, target: &Raster) -> Result<Raster> {
    if !pred.same_shape(target) {
        return Err(shape_err!("prediction {:?} vs target {:?}", pred.dims(), target.dims()));
    }
    let n = pred.data().len().max(1) as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).clamp(-1.0, 1.0) / n)
        .collect();
    Raster::new(pred.height(), pred.width(), pred.channels(), data)
}

/// Propagates a feature-resolution reference signal to the query and
/// upsamples it to `out_h × out_w`. Returns the affinity, the
/// feature-resolution estimate and the full-resolution estimate.
pub fn reconstruct(
    c_r_d: &LabelMap,
    f_r: &FeatureMap,
    f_q: &FeatureMap,
    roi: &RoiConfig,
    out_h: usize,
    out_w: usize,
) -> Result<(AffinityBlock, LabelMap, LabelMap)> {
    let block = local_affinity(f_q, &[f_r], roi)?;
    let small = propagate_labels(&block, &[c_r_d])?;
    let full = bilinear_resize(&small, out_h, out_w)?;
    Ok((block, small, full))
}

/// One training example: Lab frames and the dropped channel.
#[derive(Debug, Clone)]
pub struct Example {
    pub reference: Image,
    pub query: Image,
    pub channel: LabChannel,
}

impl Example {
    pub fn new(reference: Image, query: Image, channel: LabChannel) -> Result<Self> {
        if reference.space() != ColorSpace::Lab || query.space() != ColorSpace::Lab {
            return Err(arg_err!("training examples are Lab frames"));
        }
        if channel == LabChannel::L {
            return Err(arg_err!("only a or b may be dropped"));
        }
        if (reference.height(), reference.width()) != (query.height(), query.width()) {
            return Err(shape_err!("reference and query sizes differ"));
        }
        Ok(Self {
            reference,
            query,
            channel,
        })
    }
}

struct Forward {
    loss: f64,
    full: Raster,
    target_q: Raster,
    grad_full: Raster,
    block: AffinityBlock,
    c_r_d: LabelMap,
    f_q: FeatureMap,
    f_r: FeatureMap,
    cache_q: EncoderCache,
    cache_r: EncoderCache,
}

fn forward(
    ex: &Example,
    params: &EncoderParams,
    enc: &EncoderConfig,
    roi: &RoiConfig,
    with_grad: bool,
) -> Result<Forward> {
    let (in_r, target_r) = channel_dropout(&ex.reference, ex.channel)?;
    let (in_q, target_q) = channel_dropout(&ex.query, ex.channel)?;
    let (f_r, cache_r) = encoder::encode_with_cache(&in_r, params, enc)?;
    let (f_q, cache_q) = encoder::encode_with_cache(&in_q, params, enc)?;
    let (c_r_d, _) = align_down(&target_r, enc.output_stride())?;
    let (block, _, full) = reconstruct(&c_r_d, &f_r, &f_q, roi, ex.query.height(), ex.query.width())?;
    let loss = huber_loss(&full, &target_q)?;
    let grad_full = if with_grad {
        huber_grad(&full, &target_q)?
    } else {
        Raster::zeros(0, 0, 0)
    };
    Ok(Forward {
        loss,
        full,
        target_q,
        grad_full,
        block,
        c_r_d,
        f_q,
        f_r,
        cache_q,
        cache_r,
    })
}

/// Reconstruction loss of one example.
pub fn example_loss(ex: &Example, params: &EncoderParams, enc: &EncoderConfig, roi: &RoiConfig) -> Result<f64> {
    forward(ex, params, enc, roi, false).map(|f| f.loss)
}

/// Reconstruction loss of one example and its gradient w.r.t. every encoder
/// parameter.
pub fn example_loss_and_grad(
    ex: &Example,
    params: &EncoderParams,
    enc: &EncoderConfig,
    roi: &RoiConfig,
) -> Result<(f64, EncoderParams)> {
    let fw = forward(ex, params, enc, roi, true)?;
    let (fh, fwid) = (fw.f_q.height(), fw.f_q.width());
    let grad_small = bilinear_resize_backward(&fw.grad_full, fh, fwid)?;
    let temperature = roi.temperature_for(fw.f_q.channels());
    let g = match_backward(&fw.block, &fw.f_q, &[&fw.f_r], &[&fw.c_r_d], temperature, &grad_small)?;
    let mut grads = EncoderParams::zeros(enc);
    encoder::backward(&fw.cache_q, &g.query, params, enc, &mut grads)?;
    encoder::backward(&fw.cache_r, &g.refs[0], params, enc, &mut grads)?;
    if grads.values().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder gradients"));
    }
    Ok((fw.loss, grads))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: EncoderParams,
    v: EncoderParams,
    steps: i32,
}

impl Adam {
    pub fn new(like: &EncoderParams) -> Self {
        let mut m = like.clone();
        m.scale(0.0);
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            v: m.clone(),
            m,
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.steps as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.steps as f64);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let tensors = params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (libm::sqrt(vh) + eps);
            }
        }
    }
}

/// Trained parameters and the mean batch loss of every iteration.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: EncoderParams,
    pub losses: Vec<f64>,
}

/// Number of updates `train` performs for these videos.
pub fn total_iterations(videos: &[Vec<Image>], cfg: &TrainConfig) -> usize {
    let pairs: usize = videos.iter().map(|v| v.len().saturating_sub(1)).sum();
    let per_epoch = pairs.div_ceil(cfg.batch_size.max(1));
    let total = per_epoch * cfg.epochs;
    cfg.max_iterations.map_or(total, |m| total.min(m))
}

/// Draws one Lab training example from a random video.
pub fn draw_example(videos: &[Vec<Image>], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Example> {
    let eligible: Vec<&Vec<Image>> = videos.iter().filter(|v| v.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(arg_err!("no video has two or more frames"));
    }
    let video = eligible[rng.random_range(0..eligible.len())];
    let (r, q) = sample_pair(video, cfg.max_gap, cfg.input_size, rng)?;
    let channel = if rng.random_bool(0.5) {
        LabChannel::A
    } else {
        LabChannel::B
    };
    let lab = |img: Image| {
        if img.space() == ColorSpace::Lab {
            Ok(img)
        } else {
            rgb_to_lab(&img)
        }
    };
    Example::new(lab(r)?, lab(q)?, channel)
}

/// Runs Adam on `params`, calling `on_iteration(i, loss)` after every update.
/// Videos are RGB or Lab frame lists.
pub fn train_with(
    videos: &[Vec<Image>],
    enc: &EncoderConfig,
    mut params: EncoderParams,
    cfg: &TrainConfig,
    mut on_iteration: impl FnMut(usize, f64),
) -> Result<TrainOutput> {
    cfg.validate(enc)?;
    if videos.iter().all(|v| v.len() < 2) {
        return Err(arg_err!("training needs at least one video with two frames"));
    }
    let roi = cfg.roi();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&params);
    let iterations = total_iterations(videos, cfg);
    let mut losses = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let batch: Vec<Example> = (0..cfg.batch_size)
            .map(|_| draw_example(videos, cfg, &mut rng))
            .collect::<Result<_>>()?;
        let mut total = EncoderParams::zeros(enc);
        let mut loss = 0.0;
        for ex in &batch {
            let (l, g) = match example_loss_and_grad(ex, &params, enc, &roi) {
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { iteration: it }),
                other => other?,
            };
            loss += l;
            total.add_assign(&g);
        }
        let n = batch.len() as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        total.scale(1.0 / n);
        adam.step(&mut params, &total, cfg.learning_rate_at(it));
        if params.values().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { iteration: it });
        }
        losses.push(loss);
        on_iteration(it, loss);
    }
    Ok(TrainOutput { params, losses })
}

/// [`train_with`] from a seeded initialization.
pub fn train(videos: &[Vec<Image>], enc: &EncoderConfig, cfg: &TrainConfig) -> Result<TrainOutput> {
    let params = EncoderParams::init(enc, cfg.seed)?;
    train_with(videos, enc, params, cfg, |_, _| {})
}

/// Result of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Flat parameter index with the largest error.
    pub worst_index: usize,
    /// Parameters whose step had to shrink to stay off a kink.
    pub reduced_steps: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(1e-8);
    libm::fabs(analytic - numeric) / denom
}

/// Loss of `ex` together with which linear piece of every ReLU and of the
/// Huber penalty the forward pass lands on.
pub fn loss_and_signature(
    ex: &Example,
    params: &EncoderParams,
    enc: &EncoderConfig,
    roi: &RoiConfig,
) -> Result<(f64, Vec<bool>)> {
    let fw = forward(ex, params, enc, roi, false)?;
    let mut sig = fw.cache_r.relu_pattern();
    sig.extend(fw.cache_q.relu_pattern());
    for (p, t) in fw.full.data().iter().zip(fw.target_q.data()) {
        sig.push(libm::fabs(p - t) < 1.0);
        sig.push(p > t);
    }
    Ok((fw.loss, sig))
}

/// Checks every parameter's analytic gradient on `ex` against the
/// fourth-order central difference
/// `(8 (L(θ + h) − L(θ − h)) − (L(θ + 2h) − L(θ − 2h))) / 12h`.
///
/// The loss is only piecewise smooth, and a stencil straddling a ReLU or
/// Huber kink measures neither side's slope. For each parameter `h` starts at
/// `step` and is divided by ten, at most `shrinks` times, until every stencil
/// point shares the signature of `θ` (see [`loss_and_signature`]).
pub fn gradient_check(
    ex: &Example,
    params: &EncoderParams,
    enc: &EncoderConfig,
    roi: &RoiConfig,
    step: f64,
    shrinks: usize,
) -> Result<GradCheck> {
    let (_, grads) = example_loss_and_grad(ex, params, enc, roi)?;
    let analytic: Vec<f64> = grads.values().collect();
    let (_, base) = loss_and_signature(ex, params, enc, roi)?;
    let mut probe = params.clone();
    let mut report = GradCheck {
        checked: 0,
        max_relative_error: 0.0,
        worst_index: 0,
        reduced_steps: 0,
    };
    let mut flat = 0;
    for ti in 0..probe.tensors().len() {
        for vi in 0..probe.tensors()[ti].data.len() {
            let orig = probe.tensors()[ti].data[vi];
            let mut h = step;
            let mut tries = 0;
            let numeric = loop {
                let mut at = |offset: f64| -> Result<(f64, bool)> {
                    probe.tensors_mut()[ti].data[vi] = orig + offset;
                    let (l, sig) = loss_and_signature(ex, &probe, enc, roi)?;
                    Ok((l, sig == base))
                };
                let (p1, s1) = at(h)?;
                let (m1, s2) = at(-h)?;
                let (p2, s3) = at(2.0 * h)?;
                let (m2, s4) = at(-2.0 * h)?;
                if (s1 && s2 && s3 && s4) || tries == shrinks {
                    break (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
                }
                h /= 10.0;
                tries += 1;
            };
            probe.tensors_mut()[ti].data[vi] = orig;
            if tries > 0 {
                report.reduced_steps += 1;
            }
            let err = relative_error(analytic[flat], numeric);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_index = flat;
            }
            report.checked += 1;
            flat += 1;
        }
    }
    Ok(report)
}
