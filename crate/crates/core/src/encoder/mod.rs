//! Strided residual feature extractor.
//!
//! The full configuration is a ResNet-18 variant that keeps a stride of 4:
//!
//! | stage | output | layers                         |
//! |-------|--------|--------------------------------|
//! | conv1 | H/2    | 7×7, 64, stride 2              |
//! | conv2 | H/2    | 2 × [3×3, 64; 3×3, 64]         |
//! | conv3 | H/4    | 2 × [3×3, 128; 3×3, 128]       |
//! | conv4 | H/4    | 2 × [3×3, 256; 3×3, 256]       |
//! | conv5 | H/4    | 2 × [3×3, 256; 3×3, 256]       |
//!
//! Each convolution is followed by a per-channel affine normalization
//! (`scale * x + shift`, running statistics fixed at identity) and ReLU.
//! Residual blocks add an identity shortcut, or a 1×1 convolution plus
//! normalization when the stride or channel count changes, before the final
//! ReLU.

mod conv;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use self::conv::ConvShape;
use crate::error::{arg_err, shape_err};
use crate::{ColorSpace, Image, Raster, Result};

/// Encoder output: `h × w × c` features at the configured stride.
pub type FeatureMap = Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
}

/// A run of residual blocks; only the first block applies `stride`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub stem: ConvSpec,
    pub stages: Vec<StageSpec>,
    /// Per-channel multipliers applied to `(L, a, b)` before the first layer.
    pub input_scale: [f64; 3],
}

impl EncoderConfig {
    pub const DEFAULT_INPUT_SCALE: [f64; 3] = [1.0 / 100.0, 1.0 / 128.0, 1.0 / 128.0];

    /// The modified ResNet-18: stride 4, 256 output channels.
    pub fn full() -> Self {
        let stage = |channels, stride| StageSpec {
            channels,
            blocks: 2,
            stride,
        };
        Self {
            stem: ConvSpec {
                kernel: 7,
                channels: 64,
                stride: 2,
            },
            stages: vec![stage(64, 1), stage(128, 2), stage(256, 1), stage(256, 1)],
            input_scale: Self::DEFAULT_INPUT_SCALE,
        }
    }

    /// Desk-scale variant: 3×3/16 stem at stride 2 and one residual block of
    /// 32 channels at stride 2.
    pub fn toy() -> Self {
        Self {
            stem: ConvSpec {
                kernel: 3,
                channels: 16,
                stride: 2,
            },
            stages: vec![StageSpec {
                channels: 32,
                blocks: 1,
                stride: 2,
            }],
            input_scale: Self::DEFAULT_INPUT_SCALE,
        }
    }

    pub fn output_stride(&self) -> usize {
        self.stages.iter().fold(self.stem.stride, |acc, s| acc * s.stride)
    }

    pub fn output_channels(&self) -> usize {
        self.stages.last().map_or(self.stem.channels, |s| s.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let odd = |k: usize| k % 2 == 1;
        if !odd(self.stem.kernel) || self.stem.channels == 0 || self.stem.stride == 0 {
            return Err(arg_err!("invalid stem {:?}", self.stem));
        }
        for s in &self.stages {
            if s.channels == 0 || s.blocks == 0 || s.stride == 0 {
                return Err(arg_err!("invalid stage {:?}", s));
            }
        }
        if self.input_scale.iter().any(|v| !v.is_finite()) {
            return Err(arg_err!("input scale must be finite"));
        }
        Ok(())
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    fn zeros(name: String, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Encoder weights as an ordered list of named tensors. The order is fixed by
/// the [`EncoderConfig`] the parameters were built for; gradients use the
/// same container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    weight: usize,
    bias: usize,
    shape: ConvShape,
}

#[derive(Debug, Clone, Copy)]
struct NormIdx {
    scale: usize,
    shift: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    conv1: ConvIdx,
    norm1: NormIdx,
    conv2: ConvIdx,
    norm2: NormIdx,
    shortcut: Option<(ConvIdx, NormIdx)>,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: ConvIdx,
    stem_norm: NormIdx,
    blocks: Vec<BlockIdx>,
}

impl Layout {
    /// Walks the config, emitting tensor names/shapes and recording indices.
    fn build(config: &EncoderConfig, tensors: &mut Vec<Tensor>) -> Layout {
        let conv = |tensors: &mut Vec<Tensor>, name: &str, shape: ConvShape| {
            let weight = tensors.len();
            tensors.push(Tensor::zeros(
                format!("{name}.weight"),
                vec![shape.kernel, shape.kernel, shape.cin, shape.cout],
            ));
            tensors.push(Tensor::zeros(format!("{name}.bias"), vec![shape.cout]));
            ConvIdx {
                weight,
                bias: weight + 1,
                shape,
            }
        };
        let norm = |tensors: &mut Vec<Tensor>, name: &str, channels: usize| {
            let scale = tensors.len();
            tensors.push(Tensor::zeros(format!("{name}.scale"), vec![channels]));
            tensors.push(Tensor::zeros(format!("{name}.shift"), vec![channels]));
            NormIdx {
                scale,
                shift: scale + 1,
            }
        };

        let stem = conv(
            tensors,
            "conv1",
            ConvShape {
                kernel: config.stem.kernel,
                stride: config.stem.stride,
                cin: 3,
                cout: config.stem.channels,
            },
        );
        let stem_norm = norm(tensors, "norm1", config.stem.channels);
        let mut blocks = Vec::new();
        let mut cin = config.stem.channels;
        for (si, stage) in config.stages.iter().enumerate() {
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                let name = format!("stage{}.block{}", si + 2, b);
                let cout = stage.channels;
                let conv1 = conv(
                    tensors,
                    &format!("{name}.conv1"),
                    ConvShape {
                        kernel: 3,
                        stride,
                        cin,
                        cout,
                    },
                );
                let norm1 = norm(tensors, &format!("{name}.norm1"), cout);
                let conv2 = conv(
                    tensors,
                    &format!("{name}.conv2"),
                    ConvShape {
                        kernel: 3,
                        stride: 1,
                        cin: cout,
                        cout,
                    },
                );
                let norm2 = norm(tensors, &format!("{name}.norm2"), cout);
                let shortcut = (stride != 1 || cin != cout).then(|| {
                    let c = conv(
                        tensors,
                        &format!("{name}.shortcut"),
                        ConvShape {
                            kernel: 1,
                            stride,
                            cin,
                            cout,
                        },
                    );
                    (c, norm(tensors, &format!("{name}.shortcut_norm"), cout))
                });
                blocks.push(BlockIdx {
                    conv1,
                    norm1,
                    conv2,
                    norm2,
                    shortcut,
                });
                cin = cout;
            }
        }
        Layout {
            stem,
            stem_norm,
            blocks,
        }
    }

    fn of(config: &EncoderConfig) -> Layout {
        Layout::build(config, &mut Vec::new())
    }

    fn norms(&self) -> impl Iterator<Item = NormIdx> + '_ {
        core::iter::once(self.stem_norm).chain(
            self.blocks
                .iter()
                .flat_map(|b| [b.norm1, b.norm2].into_iter().chain(b.shortcut.map(|(_, n)| n))),
        )
    }

    fn convs(&self) -> impl Iterator<Item = ConvIdx> + '_ {
        core::iter::once(self.stem).chain(
            self.blocks
                .iter()
                .flat_map(|b| [b.conv1, b.conv2].into_iter().chain(b.shortcut.map(|(c, _)| c))),
        )
    }
}

/// Uniform bound for a weight tensor with the given fan-in (He uniform).
pub fn init_bound(fan_in: usize) -> f64 {
    libm::sqrt(6.0 / fan_in as f64)
}

impl EncoderParams {
    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: &EncoderConfig) -> Self {
        let mut tensors = Vec::new();
        Layout::build(config, &mut tensors);
        Self { tensors }
    }

    /// Seeded initialization: convolution weights uniform in
    /// `±sqrt(6 / fan_in)`, biases and norm shifts zero, norm scales one.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let layout = Layout::of(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in layout.convs() {
            let fan_in = c.shape.kernel * c.shape.kernel * c.shape.cin;
            let bound = init_bound(fan_in);
            for w in params.tensors[c.weight].data.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        for n in layout.norms() {
            params.tensors[n.scale].data.fill(1.0);
        }
        Ok(params)
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against `config`.
    pub fn from_tensors(config: &EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = Self::zeros(config);
        if expected.tensors.len() != tensors.len() {
            return Err(shape_err!(
                "expected {} tensors, got {}",
                expected.tensors.len(),
                tensors.len()
            ));
        }
        for (e, t) in expected.tensors.iter().zip(&tensors) {
            if e.name != t.name || e.shape != t.shape || t.data.len() != e.data.len() {
                return Err(shape_err!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    t.name,
                    t.shape,
                    e.name,
                    e.shape
                ));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(crate::Error::NonFinite("encoder parameters"));
            }
        }
        Ok(Self { tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// `self += other`, element-wise. Panics if the layouts differ.
    pub fn add_assign(&mut self, other: &EncoderParams) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }

    /// Flat view over every scalar, in tensor order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }
}

fn norm_forward(x: &Raster, scale: &[f64], shift: &[f64]) -> Raster {
    let c = x.channels();
    let mut out = x.clone();
    for cell in out.data_mut().chunks_exact_mut(c) {
        for k in 0..c {
            cell[k] = scale[k] * cell[k] + shift[k];
        }
    }
    out
}

fn relu(x: &Raster) -> Raster {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn scale_input(img: &Image, config: &EncoderConfig) -> Result<Raster> {
    if img.space() != ColorSpace::Lab {
        return Err(arg_err!("encoder expects a Lab image"));
    }
    let stride = config.output_stride();
    if !img.height().is_multiple_of(stride)
        || !img.width().is_multiple_of(stride)
        || img.height() == 0
        || img.width() == 0
    {
        return Err(shape_err!(
            "input {}x{} is not a positive multiple of the stride {}",
            img.height(),
            img.width(),
            stride
        ));
    }
    let s = config.input_scale;
    let mut r = img.raster().clone();
    for px in r.data_mut().chunks_exact_mut(3) {
        px[0] *= s[0];
        px[1] *= s[1];
        px[2] *= s[2];
    }
    Ok(r)
}

/// Activations kept from a forward pass for [`backward`].
#[derive(Debug, Clone)]
pub struct EncoderCache {
    input: Raster,
    stem_pre: Raster,
    stem_normed: Raster,
    blocks: Vec<BlockCache>,
}

impl EncoderCache {
    /// Whether each ReLU input was positive, in layer order. Two parameter
    /// settings with the same pattern lie on the same linear piece of every
    /// ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let positive = |r: &Raster| r.data().iter().map(|&v| v > 0.0).collect::<Vec<_>>();
        let mut out = positive(&self.stem_normed);
        for b in &self.blocks {
            out.extend(positive(&b.n1));
            out.extend(positive(&b.sum));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    input: Raster,
    z1: Raster,
    n1: Raster,
    h1: Raster,
    z2: Raster,
    zs: Option<Raster>,
    sum: Raster,
}

fn check_params(params: &EncoderParams, config: &EncoderConfig) -> Result<Layout> {
    config.validate()?;
    let expected = EncoderParams::zeros(config);
    let ok = expected.tensors.len() == params.tensors.len()
        && expected
            .tensors
            .iter()
            .zip(&params.tensors)
            .all(|(a, b)| a.shape == b.shape && a.data.len() == b.data.len());
    if !ok {
        return Err(shape_err!("parameters do not match the encoder config"));
    }
    Ok(Layout::of(config))
}

fn run(
    img: &Image,
    params: &EncoderParams,
    config: &EncoderConfig,
    keep: bool,
) -> Result<(FeatureMap, Option<EncoderCache>)> {
    let layout = check_params(params, config)?;
    let t = &params.tensors;
    let conv = |x: &Raster, c: ConvIdx| conv::forward(x, &t[c.weight].data, &t[c.bias].data, c.shape);
    let norm = |x: &Raster, n: NormIdx| norm_forward(x, &t[n.scale].data, &t[n.shift].data);

    let input = scale_input(img, config)?;
    let stem_pre = conv(&input, layout.stem);
    let stem_normed = norm(&stem_pre, layout.stem_norm);
    let mut x = relu(&stem_normed);
    let mut caches = Vec::new();
    for b in &layout.blocks {
        let z1 = conv(&x, b.conv1);
        let n1 = norm(&z1, b.norm1);
        let h1 = relu(&n1);
        let z2 = conv(&h1, b.conv2);
        let mut sum = norm(&z2, b.norm2);
        let zs = match b.shortcut {
            Some((c, n)) => {
                let zs = conv(&x, c);
                let s = norm(&zs, n);
                for (a, v) in sum.data_mut().iter_mut().zip(s.data()) {
                    *a += v;
                }
                Some(zs)
            }
            None => {
                for (a, v) in sum.data_mut().iter_mut().zip(x.data()) {
                    *a += v;
                }
                None
            }
        };
        let out = relu(&sum);
        if keep {
            caches.push(BlockCache {
                input: x,
                z1,
                n1,
                h1,
                z2,
                zs,
                sum,
            });
        }
        x = out;
    }
    let cache = keep.then_some(EncoderCache {
        input,
        stem_pre,
        stem_normed,
        blocks: caches,
    });
    Ok((x, cache))
}

/// Encodes a Lab frame whose sides are multiples of the output stride.
pub fn encode(img: &Image, params: &EncoderParams, config: &EncoderConfig) -> Result<FeatureMap> {
    run(img, params, config, false).map(|(f, _)| f)
}

/// Like [`encode`], also returning the activations needed by [`backward`].
pub fn encode_with_cache(
    img: &Image,
    params: &EncoderParams,
    config: &EncoderConfig,
) -> Result<(FeatureMap, EncoderCache)> {
    let (f, cache) = run(img, params, config, true)?;
    Ok((f, cache.expect("cache requested")))
}

fn relu_backward(grad: &mut Raster, pre: &Raster) {
    for (g, &p) in grad.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Returns the gradient w.r.t. the norm input; accumulates parameter grads.
fn norm_backward(
    grad: &Raster,
    input: &Raster,
    n: NormIdx,
    params: &EncoderParams,
    grads: &mut EncoderParams,
) -> Raster {
    let c = grad.channels();
    let scale = &params.tensors[n.scale].data;
    let mut gs = vec![0.0; c];
    let mut gb = vec![0.0; c];
    let mut out = grad.clone();
    for ((g, x), o) in grad
        .data()
        .chunks_exact(c)
        .zip(input.data().chunks_exact(c))
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        for k in 0..c {
            gs[k] += g[k] * x[k];
            gb[k] += g[k];
            o[k] = g[k] * scale[k];
        }
    }
    add_into(&mut grads.tensors[n.scale].data, &gs);
    add_into(&mut grads.tensors[n.shift].data, &gb);
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn conv_backward(
    grad: &Raster,
    input: &Raster,
    c: ConvIdx,
    params: &EncoderParams,
    grads: &mut EncoderParams,
    need_input: bool,
) -> Option<Raster> {
    let g = conv::backward(input, &params.tensors[c.weight].data, grad, c.shape, need_input);
    add_into(&mut grads.tensors[c.weight].data, &g.weight);
    add_into(&mut grads.tensors[c.bias].data, &g.bias);
    g.input
}

/// Reverse pass: accumulates `∂loss/∂θ` into `grads` given `∂loss/∂features`.
pub fn backward(
    cache: &EncoderCache,
    grad_features: &Raster,
    params: &EncoderParams,
    config: &EncoderConfig,
    grads: &mut EncoderParams,
) -> Result<()> {
    let layout = check_params(params, config)?;
    if grads.tensors.len() != params.tensors.len() {
        return Err(shape_err!("gradient container does not match parameters"));
    }
    let mut g = grad_features.clone();
    for (b, bc) in layout.blocks.iter().zip(&cache.blocks).rev() {
        if !g.same_shape(&bc.sum) {
            return Err(shape_err!("feature gradient has the wrong shape"));
        }
        relu_backward(&mut g, &bc.sum);
        // main branch
        let gz2 = norm_backward(&g, &bc.z2, b.norm2, params, grads);
        let mut gh1 = conv_backward(&gz2, &bc.h1, b.conv2, params, grads, true).expect("input grad");
        relu_backward(&mut gh1, &bc.n1);
        let gz1 = norm_backward(&gh1, &bc.z1, b.norm1, params, grads);
        let mut gin = conv_backward(&gz1, &bc.input, b.conv1, params, grads, true).expect("input grad");
        // shortcut
        match (b.shortcut, &bc.zs) {
            (Some((c, n)), Some(zs)) => {
                let gzs = norm_backward(&g, zs, n, params, grads);
                let gs = conv_backward(&gzs, &bc.input, c, params, grads, true).expect("input grad");
                add_into(gin.data_mut(), gs.data());
            }
            _ => add_into(gin.data_mut(), g.data()),
        }
        g = gin;
    }
    if !g.same_shape(&cache.stem_normed) {
        return Err(shape_err!("feature gradient has the wrong shape"));
    }
    relu_backward(&mut g, &cache.stem_normed);
    let gz = norm_backward(&g, &cache.stem_pre, layout.stem_norm, params, grads);
    conv_backward(&gz, &cache.input, layout.stem, params, grads, false);
    Ok(())
}
