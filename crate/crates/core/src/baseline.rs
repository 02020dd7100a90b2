//! Multi-scale baseline built from the same codec pair.
//!
//! Scale 0 is the full image and scale `s` is downsampled by `2^s`. Starting
//! at the coarsest scale, each scale encodes its input plus the upsampled
//! residual image from the coarser scale, adds the upsampled coarser
//! features, and decodes. The finest decoder output plus the input is the
//! result, so a single scale is the same network as a one-level hierarchy.

use crate::blocks::{init_params, BoundCodec, CodecConfig, CodecPair};
use crate::error::{Error, Result};
use crate::hierarchy::{derive_seed, level_config, LevelVars, Pass};
use crate::tensor::{Resize, Scalar, Shape, Tape, Tensor, Var};

pub const MAX_SCALES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct DmsnModel<T> {
    /// Finest scale first.
    pub codecs: Vec<CodecPair<T>>,
    pub top_residual: bool,
}

/// Required multiple of the input height and width for `scales` scales.
pub fn size_multiple(scales: usize) -> usize {
    CodecConfig::DOWNSAMPLE << (scales - 1)
}

impl<T: Scalar> DmsnModel<T> {
    /// Scale `s` uses the pair drawn from `derive_seed(seed, s)`, so one scale
    /// matches a one-level hierarchy built from the same seed.
    pub fn init(config: &CodecConfig, scales: usize, top_residual: bool, seed: u64) -> Result<Self> {
        if !(1..=MAX_SCALES).contains(&scales) {
            return Err(Error::Config(format!(
                "scale count must be between 1 and {MAX_SCALES}, got {scales}"
            )));
        }
        if top_residual && config.out_channels != config.in_channels {
            return Err(Error::Config(format!(
                "the output residual needs matching channels, got {} in and {} out",
                config.in_channels, config.out_channels
            )));
        }
        let codecs = (0..scales)
            .map(|s| init_params(&level_config(config, s), derive_seed(seed, s as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DmsnModel { codecs, top_residual })
    }

    pub fn scales(&self) -> usize {
        self.codecs.len()
    }

    pub fn param_count(&self) -> usize {
        self.codecs.iter().map(CodecPair::param_count).sum()
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let m = size_multiple(self.scales());
        if shape.h() % m != 0 || shape.w() % m != 0 || shape.h() < 2 * m || shape.w() < 2 * m {
            return Err(Error::Geometry {
                op: "dmsn",
                reason: format!(
                    "input {}x{} must be a multiple of {m} and at least {} for {} scales",
                    shape.h(),
                    shape.w(),
                    2 * m,
                    self.scales()
                ),
            });
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundDmsn<T>> {
        if self.codecs.is_empty() {
            return Err(Error::Model("multi-scale model has no codec pairs".into()));
        }
        Ok(BoundDmsn {
            codecs: self.codecs.iter().map(|c| c.bind(tape)).collect(),
            top_residual: self.top_residual,
        })
    }

    pub fn forward(&self, b1: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(b1.shape())?;
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape)?;
        let x = tape.leaf(b1.clone());
        Ok(bound.forward(&mut tape, &x)?.output.value().clone())
    }

    /// FLOPs per scale, finest first. Resampling is counted at four
    /// multiply-adds per output element.
    pub fn scale_flops(&self, n: usize, h: usize, w: usize) -> Result<Vec<u64>> {
        let c0 = self.codecs[0].config.in_channels;
        self.check_input(Shape::new(n, c0, h, w))?;
        let last = self.scales() - 1;
        self.codecs
            .iter()
            .enumerate()
            .map(|(s, pair)| {
                let x = Shape::new(n, c0, h >> s, w >> s);
                let (feat, enc) = pair.encoder_flops(x)?;
                let (img, dec) = pair.decoder_flops(feat)?;
                let mut extra = 0u64;
                if s > 0 {
                    extra += 8 * x.numel() as u64;
                }
                if s < last {
                    extra += 9 * (x.numel() + feat.numel()) as u64;
                }
                if s == 0 && self.top_residual {
                    extra += img.numel() as u64;
                }
                Ok(enc + dec + extra)
            })
            .collect()
    }

    pub fn zero_decoder_heads(&mut self) {
        self.codecs.iter_mut().for_each(CodecPair::zero_head);
    }
}

#[derive(Clone, Debug)]
pub struct BoundDmsn<T> {
    pub codecs: Vec<BoundCodec<T>>,
    pub top_residual: bool,
}

impl<T: Scalar> BoundDmsn<T> {
    /// Coarse-to-fine pass. The returned levels are finest first; each holds
    /// one tensor per field (`c_star` repeats `c`).
    pub fn forward(&self, tape: &mut Tape<T>, b1: &Var<T>) -> Result<Pass<T>> {
        let scales = self.codecs.len();
        let m = size_multiple(scales);
        let s0 = b1.shape();
        if s0.h() % m != 0 || s0.w() % m != 0 || s0.h() < 2 * m || s0.w() < 2 * m {
            return Err(Error::Geometry {
                op: "dmsn",
                reason: format!("input {}x{} is not valid for {scales} scales", s0.h(), s0.w()),
            });
        }
        let mut pyramid = vec![b1.clone()];
        for _ in 1..scales {
            let next = tape.resize_bilinear(pyramid.last().expect("non-empty"), Resize::Down)?;
            pyramid.push(next);
        }
        let mut levels: Vec<Option<LevelVars<T>>> = vec![None; scales];
        let mut coarser: Option<(Var<T>, Var<T>)> = None;
        for s in (0..scales).rev() {
            let pair = &self.codecs[s];
            let b = pyramid[s].clone();
            let mut input = b.clone();
            if let Some((img, _)) = &coarser {
                let up = tape.resize_bilinear(img, Resize::Up)?;
                input = tape.add(&input, &up)?;
            }
            let mut c = pair.encode(tape, &input)?;
            if let Some((_, feat)) = &coarser {
                let up = tape.resize_bilinear(feat, Resize::Up)?;
                c = tape.add(&c, &up)?;
            }
            let mut out = pair.decode(tape, &c)?;
            coarser = Some((out.clone(), c.clone()));
            if s == 0 && self.top_residual {
                out = tape.add(&out, b1)?;
            }
            levels[s] = Some(LevelVars {
                b: vec![b],
                c: vec![c.clone()],
                c_star: vec![c],
                s: vec![out],
            });
        }
        let levels: Vec<LevelVars<T>> = levels.into_iter().map(|l| l.expect("every scale visited")).collect();
        Ok(Pass {
            output: levels[0].s[0].clone(),
            levels,
        })
    }

    pub fn vars(&self) -> Vec<&Var<T>> {
        self.codecs.iter().flat_map(BoundCodec::vars).collect()
    }
}
