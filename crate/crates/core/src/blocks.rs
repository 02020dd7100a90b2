//! Encoder/decoder pair used at every level of the hierarchy.
//!
//! The encoder has three stages. Each stage opens with a 3x3 convolution
//! (stride 1 for the first stage, stride 2 for the others) followed by
//! residual blocks `x + 0.1 * conv(relu(conv(x)))`. With the default two blocks
//! per stage that is 15 convolutions, 6 residual links and 6 ReLUs, and the
//! encoder downsamples by 4. The decoder mirrors it: residual blocks first,
//! then a 4x4 stride-2 transposed convolution to leave each of the two
//! deeper stages, and a final 3x3 convolution producing the image planes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::ConvGeom;
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

/// Constant factor on the output of every residual branch.
pub const RESIDUAL_SCALE: f64 = 0.1;

/// Extra factor on the init range of the final decoder convolution, so a
/// fresh codec adds only a small perturbation to its input.
pub const HEAD_INIT_GAIN: f64 = 0.1;

/// Layer layout of one encoder/decoder pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub in_channels: usize,
    pub stage_channels: [usize; 3],
    pub res_blocks_per_stage: usize,
    pub kernel_size: usize,
    pub out_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            in_channels: 3,
            stage_channels: [32, 64, 128],
            res_blocks_per_stage: 2,
            kernel_size: 3,
            out_channels: 3,
        }
    }
}

impl CodecConfig {
    /// Reduced-width layout for CPU-scale experiments.
    pub fn desk() -> Self {
        CodecConfig {
            stage_channels: [8, 16, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("image channel counts must be positive".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channel counts must be positive".into()));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Channel count of the encoded feature map.
    pub fn feature_channels(&self) -> usize {
        self.stage_channels[2]
    }

    pub fn encoder_convs(&self) -> usize {
        3 + 3 * 2 * self.res_blocks_per_stage
    }

    pub fn residual_links(&self) -> usize {
        3 * self.res_blocks_per_stage
    }

    /// Spatial reduction between encoder input and output.
    pub const DOWNSAMPLE: usize = 4;

    /// Same layout with a different number of decoder output planes.
    pub fn with_out_channels(&self, out_channels: usize) -> Self {
        CodecConfig {
            out_channels,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
}

/// What a layer does inside the codec program.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    /// Standalone layer (stage entry/exit).
    Plain,
    /// First convolution of a residual block; followed by ReLU.
    ResFirst,
    /// Second convolution of a residual block; its output is added to the block input.
    ResSecond,
}

/// One convolution layer and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub kind: LayerKind,
    pub stride: usize,
    pub pad: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    role: Role,
}

impl<T: Scalar> ConvLayer<T> {
    /// Fan-in used for initialisation: `weight.dims[1] * kh * kw`.
    pub fn fan_in(&self) -> usize {
        let [_, c, kh, kw] = self.weight.shape().0;
        c * kh * kw
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    fn geom(&self, input: Shape) -> Result<ConvGeom> {
        match self.kind {
            LayerKind::Conv => {
                ConvGeom::conv("conv2d", input, self.weight.shape(), self.stride, self.pad)
            }
            LayerKind::ConvTranspose => {
                ConvGeom::transpose("conv_transpose2d", input, self.weight.shape(), self.stride, self.pad)
            }
        }
    }

    /// Output shape for `input` and the FLOPs spent: two per multiply-add
    /// plus one per output element for the bias.
    fn cost(&self, input: Shape) -> Result<(Shape, u64)> {
        let g = self.geom(input)?;
        let n = input.n() as u64;
        let out = match self.kind {
            LayerKind::Conv => g.output_shape(input.n()),
            LayerKind::ConvTranspose => g.input_shape(input.n()),
        };
        Ok((out, n * 2 * g.macs() + out.numel() as u64))
    }
}

/// Parameters of one encoder `F` and one decoder `G`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecPair<T> {
    pub config: CodecConfig,
    pub encoder: Vec<ConvLayer<T>>,
    pub decoder: Vec<ConvLayer<T>>,
}

/// Shapes of every layer, in program order: `(kind, stride, pad, weight, role)`.
fn encoder_program(cfg: &CodecConfig) -> Vec<(LayerKind, usize, usize, Shape, Role)> {
    let k = cfg.kernel_size;
    let p = k / 2;
    let mut layers = Vec::new();
    let mut cin = cfg.in_channels;
    for (stage, &c) in cfg.stage_channels.iter().enumerate() {
        let stride = if stage == 0 { 1 } else { 2 };
        layers.push((LayerKind::Conv, stride, p, Shape::new(c, cin, k, k), Role::Plain));
        for _ in 0..cfg.res_blocks_per_stage {
            layers.push((LayerKind::Conv, 1, p, Shape::new(c, c, k, k), Role::ResFirst));
            layers.push((LayerKind::Conv, 1, p, Shape::new(c, c, k, k), Role::ResSecond));
        }
        cin = c;
    }
    layers
}

fn decoder_program(cfg: &CodecConfig) -> Vec<(LayerKind, usize, usize, Shape, Role)> {
    let k = cfg.kernel_size;
    let p = k / 2;
    let mut layers = Vec::new();
    for stage in (0..3).rev() {
        let c = cfg.stage_channels[stage];
        for _ in 0..cfg.res_blocks_per_stage {
            layers.push((LayerKind::Conv, 1, p, Shape::new(c, c, k, k), Role::ResFirst));
            layers.push((LayerKind::Conv, 1, p, Shape::new(c, c, k, k), Role::ResSecond));
        }
        if stage > 0 {
            // transposed weights are [in, out, kh, kw]; k4 s2 p1 doubles exactly
            let next = cfg.stage_channels[stage - 1];
            layers.push((LayerKind::ConvTranspose, 2, 1, Shape::new(c, next, 4, 4), Role::Plain));
        } else {
            layers.push((LayerKind::Conv, 1, p, Shape::new(cfg.out_channels, c, k, k), Role::Plain));
        }
    }
    layers
}

/// He-uniform weights (`U(-a, a)`, `a = sqrt(6 / fan_in)`, variance `2 / fan_in`)
/// and zero biases, drawn from a ChaCha8 stream seeded with `seed`. The final
/// decoder convolution draws from `a * HEAD_INIT_GAIN` instead.
pub fn init_params<T: Scalar>(config: &CodecConfig, seed: u64) -> Result<CodecPair<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut build = |program: Vec<(LayerKind, usize, usize, Shape, Role)>, head: bool| {
        let last = program.len() - 1;
        program
            .into_iter()
            .enumerate()
            .map(|(i, (kind, stride, pad, wshape, role))| {
                let [_, c, kh, kw] = wshape.0;
                let gain = if head && i == last { HEAD_INIT_GAIN } else { 1.0 };
                let bound = gain * (6.0 / (c * kh * kw) as f64).sqrt();
                let weight =
                    Tensor::from_fn(wshape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)));
                let bias_len = match kind {
                    LayerKind::Conv => wshape.0[0],
                    LayerKind::ConvTranspose => wshape.0[1],
                };
                ConvLayer {
                    kind,
                    stride,
                    pad,
                    weight,
                    bias: Tensor::zeros(Shape::new(1, bias_len, 1, 1)),
                    role,
                }
            })
            .collect::<Vec<_>>()
    };
    let encoder = build(encoder_program(config), false);
    let decoder = build(decoder_program(config), true);
    Ok(CodecPair {
        config: config.clone(),
        encoder,
        decoder,
    })
}

impl<T: Scalar> CodecPair<T> {
    pub fn param_count(&self) -> usize {
        self.layers().map(ConvLayer::param_count).sum()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder.iter().map(ConvLayer::param_count).sum()
    }

    pub fn decoder_param_count(&self) -> usize {
        self.decoder.iter().map(ConvLayer::param_count).sum()
    }

    /// Bytes of all weights and biases at this element type.
    pub fn param_bytes(&self) -> usize {
        self.param_count() * T::DTYPE.size_of()
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvLayer<T>> {
        self.encoder.iter().chain(self.decoder.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer<T>> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }

    /// `(name, tensor)` for every parameter, encoder first, weight before bias.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (part, layers) in [("enc", &self.encoder), ("dec", &self.decoder)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{part}.{i}.weight"), &l.weight));
                out.push((format!("{part}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// The image-producing last decoder layer.
    pub fn head_mut(&mut self) -> &mut ConvLayer<T> {
        self.decoder.last_mut().expect("decoder has layers")
    }

    /// Zeroes the decoder's last layer so the decoder outputs exactly zero.
    pub fn zero_head(&mut self) {
        let head = self.head_mut();
        head.weight = Tensor::zeros(head.weight.shape());
        head.bias = Tensor::zeros(head.bias.shape());
    }

    pub fn cast<U: Scalar>(&self) -> CodecPair<U> {
        let conv = |l: &ConvLayer<T>| ConvLayer {
            kind: l.kind,
            stride: l.stride,
            pad: l.pad,
            weight: l.weight.cast(),
            bias: l.bias.cast(),
            role: l.role,
        };
        CodecPair {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(conv).collect(),
            decoder: self.decoder.iter().map(conv).collect(),
        }
    }

    /// Registers every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundCodec<T> {
        let mut bind = |layers: &[ConvLayer<T>]| {
            layers
                .iter()
                .map(|l| BoundLayer {
                    kind: l.kind,
                    stride: l.stride,
                    pad: l.pad,
                    role: l.role,
                    weight: tape.leaf(l.weight.clone()),
                    bias: tape.leaf(l.bias.clone()),
                })
                .collect()
        };
        BoundCodec {
            config: self.config.clone(),
            encoder: bind(&self.encoder),
            decoder: bind(&self.decoder),
        }
    }

    /// FLOPs of one encoder pass over an `n x in x h x w` input followed by
    /// one decoder pass over the resulting features.
    pub fn flops(&self, n: usize, h: usize, w: usize) -> Result<u64> {
        let enc = run_cost(&self.encoder, Shape::new(n, self.config.in_channels, h, w))?;
        let dec = run_cost(&self.decoder, enc.0)?;
        Ok(enc.1 + dec.1)
    }

    pub fn encoder_flops(&self, input: Shape) -> Result<(Shape, u64)> {
        run_cost(&self.encoder, input)
    }

    pub fn decoder_flops(&self, input: Shape) -> Result<(Shape, u64)> {
        run_cost(&self.decoder, input)
    }
}

/// Output shape and FLOPs of a layer program, counting ReLUs, residual
/// scales and residual adds at one FLOP per element.
fn run_cost<T: Scalar>(layers: &[ConvLayer<T>], input: Shape) -> Result<(Shape, u64)> {
    let mut shape = input;
    let mut flops = 0u64;
    for l in layers {
        let (out, f) = l.cost(shape)?;
        flops += f;
        match l.role {
            Role::ResFirst => flops += out.numel() as u64,
            Role::ResSecond => flops += 2 * out.numel() as u64,
            Role::Plain => {}
        }
        shape = out;
    }
    Ok((shape, flops))
}

/// A layer whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundLayer<T> {
    pub kind: LayerKind,
    pub stride: usize,
    pub pad: usize,
    role: Role,
    pub weight: Var<T>,
    pub bias: Var<T>,
}

impl<T: Scalar> BoundLayer<T> {
    fn apply(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        match self.kind {
            LayerKind::Conv => tape.conv2d(x, &self.weight, &self.bias, self.stride, self.pad),
            LayerKind::ConvTranspose => {
                tape.conv_transpose2d(x, &self.weight, &self.bias, self.stride, self.pad)
            }
        }
    }
}

/// A codec pair bound to a tape, ready for forward passes.
#[derive(Clone, Debug)]
pub struct BoundCodec<T> {
    pub config: CodecConfig,
    pub encoder: Vec<BoundLayer<T>>,
    pub decoder: Vec<BoundLayer<T>>,
}

fn run<T: Scalar>(tape: &mut Tape<T>, layers: &[BoundLayer<T>], x: &Var<T>) -> Result<Var<T>> {
    let mut h = x.clone();
    let mut block_input: Option<Var<T>> = None;
    for l in layers {
        match l.role {
            Role::Plain => h = l.apply(tape, &h)?,
            Role::ResFirst => {
                let t = l.apply(tape, &h)?;
                block_input = Some(std::mem::replace(&mut h, tape.relu(&t)?));
            }
            Role::ResSecond => {
                let t = l.apply(tape, &h)?;
                let t = tape.scale(&t, T::from_f64_lossy(RESIDUAL_SCALE))?;
                let skip = block_input.take().expect("residual block opened");
                h = tape.add(&skip, &t)?;
            }
        }
    }
    Ok(h)
}

impl<T: Scalar> BoundCodec<T> {
    /// `F`: `N x in x h x w` image to `N x C3 x h/4 x w/4` features.
    pub fn encode(&self, tape: &mut Tape<T>, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.c() != self.config.in_channels {
            return Err(Error::ChannelMismatch {
                op: "encode",
                expected: self.config.in_channels,
                got: s.c(),
            });
        }
        let d = CodecConfig::DOWNSAMPLE;
        if s.h() % d != 0 || s.w() % d != 0 || s.h() < 2 * d || s.w() < 2 * d {
            return Err(Error::Geometry {
                op: "encode",
                reason: format!(
                    "spatial size {}x{} must be divisible by {d} and at least {}",
                    s.h(),
                    s.w(),
                    2 * d
                ),
            });
        }
        run(tape, &self.encoder, x)
    }

    /// `G`: features back to an `N x out x 4h x 4w` image.
    pub fn decode(&self, tape: &mut Tape<T>, c: &Var<T>) -> Result<Var<T>> {
        if c.shape().c() != self.config.feature_channels() {
            return Err(Error::ChannelMismatch {
                op: "decode",
                expected: self.config.feature_channels(),
                got: c.shape().c(),
            });
        }
        run(tape, &self.decoder, c)
    }

    /// Parameter variables in the same order as [`CodecPair::named_params`].
    pub fn vars(&self) -> Vec<&Var<T>> {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> CodecPair<f64> {
        init_params(&CodecConfig::default(), 7).unwrap()
    }

    #[test]
    fn default_layout_counts() {
        let cfg = CodecConfig::default();
        assert_eq!(cfg.encoder_convs(), 15);
        assert_eq!(cfg.residual_links(), 6);
        let p = pair();
        assert_eq!(p.encoder.len(), 15);
        assert_eq!(p.decoder.len(), 15);
        let relus = p.encoder.iter().filter(|l| l.role == Role::ResFirst).count();
        assert_eq!(relus, 6);
        let deconvs = p.decoder.iter().filter(|l| l.kind == LayerKind::ConvTranspose).count();
        assert_eq!(deconvs, 2);
        assert!(p.encoder.iter().all(|l| l.kind == LayerKind::Conv));
        let strided = p.encoder.iter().filter(|l| l.stride == 2).count();
        assert_eq!(strided, 2);
    }

    #[test]
    fn exact_parameter_counts() {
        let p = pair();
        assert_eq!(p.encoder_param_count(), 868_288);
        assert_eq!(p.decoder_param_count(), 939_843);
        assert_eq!(p.param_count(), 1_808_131);
        assert_eq!(p.cast::<f32>().param_bytes(), 1_808_131 * 4);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_params::<f32>(&CodecConfig::desk(), 42).unwrap();
        let b = init_params::<f32>(&CodecConfig::desk(), 42).unwrap();
        let c = init_params::<f32>(&CodecConfig::desk(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.layers().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn he_variance_on_large_layers() {
        let p = pair();
        for l in p.layers().filter(|l| l.weight.numel() >= 1024) {
            let n = l.weight.numel() as f64;
            let mean = l.weight.sum() / n;
            let var = l.weight.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let target = 2.0 / l.fan_in() as f64;
            assert!((var / target - 1.0).abs() < 0.2, "var {var} vs {target}");
        }
    }

    #[test]
    fn encode_decode_shapes() {
        let p = init_params::<f32>(&CodecConfig::default(), 1).unwrap();
        let mut tape = Tape::inference();
        let b = p.bind(&mut tape);
        for (h, w) in [(64, 64), (8, 8), (16, 40)] {
            let x = tape.leaf(Tensor::full(Shape::new(1, 3, h, w), 0.1));
            let c = b.encode(&mut tape, &x).unwrap();
            assert_eq!(c.shape(), Shape::new(1, 128, h / 4, w / 4));
            let y = b.decode(&mut tape, &c).unwrap();
            assert_eq!(y.shape(), Shape::new(1, 3, h, w));
            assert!(y.value().is_finite());
        }
        let c = tape.leaf(Tensor::zeros(Shape::new(1, 128, 16, 16)));
        assert_eq!(b.decode(&mut tape, &c).unwrap().shape(), Shape::new(1, 3, 64, 64));
    }

    #[test]
    fn encode_rejects_bad_sizes() {
        let p = init_params::<f32>(&CodecConfig::desk(), 1).unwrap();
        let mut tape = Tape::inference();
        let b = p.bind(&mut tape);
        for (c, h, w) in [(3, 10, 8), (3, 4, 4), (1, 8, 8)] {
            let x = tape.leaf(Tensor::zeros(Shape::new(1, c, h, w)));
            assert!(b.encode(&mut tape, &x).is_err());
        }
        let f = tape.leaf(Tensor::zeros(Shape::new(1, 16, 2, 2)));
        assert!(matches!(b.decode(&mut tape, &f), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn zero_input_and_zero_bias_encode_to_zero() {
        let p = init_params::<f64>(&CodecConfig::desk(), 3).unwrap();
        let mut tape = Tape::inference();
        let b = p.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros(Shape::new(2, 3, 16, 16)));
        let c = b.encode(&mut tape, &x).unwrap();
        assert!(c.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_head_decodes_to_zero() {
        let mut p = init_params::<f64>(&CodecConfig::desk(), 3).unwrap();
        p.zero_head();
        let mut tape = Tape::inference();
        let b = p.bind(&mut tape);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let c = tape.leaf(Tensor::from_fn(Shape::new(1, 32, 4, 6), |_| r.gen_range(-3.0..3.0)));
        let y = b.decode(&mut tape, &c).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flops_scale_with_pixel_count_only() {
        let p = init_params::<f32>(&CodecConfig::default(), 0).unwrap();
        let full = p.flops(1, 64, 128).unwrap();
        let halves = 2 * p.flops(1, 32, 128).unwrap();
        let quarters = 4 * p.flops(1, 32, 64).unwrap();
        assert_eq!(full, halves);
        assert_eq!(full, quarters);
    }
}
