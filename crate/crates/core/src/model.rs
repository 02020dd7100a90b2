//! One entry point over every network kind: construction from a
//! serialisable description, parameter naming, binding and inference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baseline::{self, BoundDmsn, DmsnModel};
use crate::blocks::{CodecConfig, CodecPair};
use crate::error::{Error, Result};
use crate::hierarchy::{crop, pad_reflect, parse_pattern_with, valid_len, CropBox, HierarchySpec, Pass, SplitAxis};
use crate::stacking::{stacked_loss, BoundStack, StackModel, UnitPass};
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Dmphn,
    StackDmphn,
    Vmphn,
    StackVmphn,
    Dmsn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Dmphn,
        ModelKind::StackDmphn,
        ModelKind::Vmphn,
        ModelKind::StackVmphn,
        ModelKind::Dmsn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Dmphn => "dmphn",
            ModelKind::StackDmphn => "stack-dmphn",
            ModelKind::Vmphn => "vmphn",
            ModelKind::StackVmphn => "stack-vmphn",
            ModelKind::Dmsn => "dmsn",
        }
    }

    pub fn is_stack(self) -> bool {
        matches!(self, ModelKind::StackDmphn | ModelKind::StackVmphn)
    }

    pub fn is_v_shaped(self) -> bool {
        matches!(self, ModelKind::Vmphn | ModelKind::StackVmphn)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

/// Serialisable description of a network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub pattern: String,
    #[serde(default = "default_one")]
    pub stack: usize,
    #[serde(default = "default_one")]
    pub scales: usize,
    #[serde(default)]
    pub weight_sharing: bool,
    #[serde(default = "default_true")]
    pub top_residual: bool,
    #[serde(default)]
    pub split_axis: SplitAxis,
    #[serde(default)]
    pub codec: CodecConfig,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, pattern: &str) -> Self {
        ModelSpec {
            kind,
            pattern: pattern.to_string(),
            stack: 1,
            scales: 1,
            weight_sharing: false,
            top_residual: true,
            split_axis: SplitAxis::Height,
            codec: CodecConfig::default(),
        }
    }

    pub fn dmphn(pattern: &str) -> Self {
        Self::new(ModelKind::Dmphn, pattern)
    }

    pub fn stack_dmphn(pattern: &str, n: usize) -> Self {
        ModelSpec {
            stack: n,
            ..Self::new(ModelKind::StackDmphn, pattern)
        }
    }

    pub fn vmphn(pattern: &str) -> Self {
        Self::new(ModelKind::Vmphn, pattern)
    }

    pub fn stack_vmphn(pattern: &str, n: usize) -> Self {
        ModelSpec {
            stack: n,
            ..Self::new(ModelKind::StackVmphn, pattern)
        }
    }

    pub fn dmsn(scales: usize) -> Self {
        ModelSpec {
            scales,
            ..Self::new(ModelKind::Dmsn, "1")
        }
    }

    pub fn with_codec(mut self, codec: CodecConfig) -> Self {
        self.codec = codec;
        self
    }

    pub fn with_weight_sharing(mut self, on: bool) -> Self {
        self.weight_sharing = on;
        self
    }

    pub fn hierarchy(&self) -> Result<HierarchySpec> {
        parse_pattern_with(&self.pattern, self.split_axis)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        let spec = self.hierarchy()?;
        if self.stack == 0 {
            return Err(Error::Config("stack depth must be at least 1".into()));
        }
        if self.stack > 1 && !self.kind.is_stack() {
            return Err(Error::Config(format!(
                "a stack depth above 1 requires stack-dmphn or stack-vmphn, not {}",
                self.kind
            )));
        }
        if self.kind == ModelKind::Dmsn {
            if spec.levels() != 1 {
                return Err(Error::Config("dmsn takes --scales, not a multi-level pattern".into()));
            }
            if self.weight_sharing {
                return Err(Error::Config("weight sharing applies to hierarchical models only".into()));
            }
            if !(1..=baseline::MAX_SCALES).contains(&self.scales) {
                return Err(Error::Config(format!(
                    "scale count must be between 1 and {}, got {}",
                    baseline::MAX_SCALES,
                    self.scales
                )));
            }
        } else if self.scales != 1 {
            return Err(Error::Config(format!("scales apply to dmsn only, not {}", self.kind)));
        }
        Ok(())
    }

    /// Short label such as `Stack(2)-DMPHN(1-2-4)`.
    pub fn label(&self) -> String {
        let ws = if self.weight_sharing { "-WS" } else { "" };
        match self.kind {
            ModelKind::Dmphn => format!("DMPHN({}){ws}", self.pattern),
            ModelKind::StackDmphn => format!("Stack({})-DMPHN({}){ws}", self.stack, self.pattern),
            ModelKind::Vmphn => format!("VMPHN({}){ws}", self.pattern),
            ModelKind::StackVmphn => format!("Stack({})-VMPHN({}){ws}", self.stack, self.pattern),
            ModelKind::Dmsn => format!("DMSN({})", self.scales),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Net<T> {
    Stack(StackModel<T>),
    Dmsn(DmsnModel<T>),
}

/// A network of any kind with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    spec: ModelSpec,
    net: Net<T>,
}

/// A bound network ready for forward passes on one tape.
pub enum BoundModel<T> {
    Stack(BoundStack<T>),
    Dmsn(BoundDmsn<T>),
}

/// All intermediate maps of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<T> {
    pub units: Vec<UnitPass<T>>,
}

impl<T: Scalar> Forward<T> {
    /// Output of every unit, the final image last.
    pub fn outputs(&self) -> Vec<Var<T>> {
        self.units.iter().map(|u| u.up.output.clone()).collect()
    }

    pub fn output(&self) -> &Var<T> {
        &self.units.last().expect("at least one unit").up.output
    }
}

impl<T: Scalar> BoundModel<T> {
    pub fn forward(&self, tape: &mut Tape<T>, b1: &Var<T>) -> Result<Forward<T>> {
        match self {
            BoundModel::Stack(s) => Ok(Forward {
                units: s.forward(tape, b1)?,
            }),
            BoundModel::Dmsn(d) => Ok(Forward {
                units: vec![UnitPass {
                    down: None,
                    up: d.forward(tape, b1)?,
                }],
            }),
        }
    }

    /// Parameter variables in [`Model::named_params`] order.
    pub fn vars(&self) -> Vec<&Var<T>> {
        match self {
            BoundModel::Stack(s) => s.vars(),
            BoundModel::Dmsn(d) => d.vars(),
        }
    }
}

/// Training objective over the unit outputs of a forward pass.
pub fn loss<T: Scalar>(tape: &mut Tape<T>, forward: &Forward<T>, g: &Var<T>) -> Result<Var<T>> {
    stacked_loss(tape, &forward.outputs(), g)
}

impl<T: Scalar> Model<T> {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let net = match spec.kind {
            ModelKind::Dmsn => Net::Dmsn(DmsnModel::init(&spec.codec, spec.scales, spec.top_residual, seed)?),
            kind => Net::Stack(StackModel::init(
                &spec.hierarchy()?,
                &spec.codec,
                spec.stack,
                kind.is_v_shaped(),
                spec.weight_sharing,
                spec.top_residual,
                seed,
            )?),
        };
        Ok(Model {
            spec: spec.clone(),
            net,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::init(&self.spec, 0).expect("spec already validated");
        for (dst, (_, src)) in out.params_mut().into_iter().zip(self.named_params()) {
            *dst = src.cast();
        }
        out
    }

    /// Every codec pair with its name prefix, in parameter order.
    pub fn pairs(&self) -> Vec<(String, &CodecPair<T>)> {
        let mut out = Vec::new();
        match &self.net {
            Net::Dmsn(d) => {
                for (s, p) in d.codecs.iter().enumerate() {
                    out.push((format!("s{}.", s + 1), p));
                }
            }
            Net::Stack(st) => {
                for (m, unit) in st.units.iter().enumerate() {
                    let unit_prefix = if self.spec.kind.is_stack() { format!("m{}.", m + 1) } else { String::new() };
                    let arms = unit.down.iter().map(|d| ("down.", d)).chain([(
                        if unit.down.is_some() { "up." } else { "" },
                        &unit.up,
                    )]);
                    for (arm, h) in arms {
                        for (i, p) in h.codecs.iter().enumerate() {
                            let lvl = if h.weight_sharing { "shared.".to_string() } else { format!("l{}.", i + 1) };
                            out.push((format!("{unit_prefix}{arm}{lvl}"), p));
                        }
                    }
                }
            }
        }
        out
    }

    fn pairs_mut(&mut self) -> Vec<&mut CodecPair<T>> {
        match &mut self.net {
            Net::Dmsn(d) => d.codecs.iter_mut().collect(),
            Net::Stack(st) => st
                .units
                .iter_mut()
                .flat_map(|u| {
                    u.down
                        .iter_mut()
                        .flat_map(|d| d.codecs.iter_mut())
                        .chain(u.up.codecs.iter_mut())
                })
                .collect(),
        }
    }

    /// `(name, tensor)` for every parameter, e.g. `l2.enc.3.weight`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.pairs()
            .into_iter()
            .flat_map(|(prefix, pair)| {
                pair.named_params()
                    .into_iter()
                    .map(move |(n, t)| (format!("{prefix}{n}"), t))
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.pairs_mut().into_iter().flat_map(CodecPair::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.pairs().iter().map(|(_, p)| p.param_count()).sum()
    }

    /// Bytes of all parameters at this element type.
    pub fn param_bytes(&self) -> usize {
        self.param_count() * T::DTYPE.size_of()
    }

    /// Parameter count per level (level 1 first), summed over
    /// units and arms. A shared pair is reported once, under level 1.
    pub fn level_params(&self) -> Vec<usize> {
        match &self.net {
            Net::Dmsn(d) => d.codecs.iter().map(CodecPair::param_count).collect(),
            Net::Stack(st) => {
                let mut out = vec![0; st.spec().levels()];
                for u in &st.units {
                    for h in u.down.iter().chain([&u.up]) {
                        for (i, p) in h.codecs.iter().enumerate() {
                            out[i] += p.param_count();
                        }
                    }
                }
                out
            }
        }
    }

    /// Analytic FLOPs per level (per scale for the multi-scale model).
    pub fn level_flops(&self, n: usize, h: usize, w: usize) -> Result<Vec<u64>> {
        match &self.net {
            Net::Dmsn(d) => d.scale_flops(n, h, w),
            Net::Stack(s) => s.level_flops(n, h, w),
        }
    }

    pub fn flops(&self, n: usize, h: usize, w: usize) -> Result<u64> {
        Ok(self.level_flops(n, h, w)?.iter().sum())
    }

    /// Height and width must be multiples of these.
    pub fn size_multiple(&self) -> (usize, usize) {
        match &self.net {
            Net::Dmsn(d) => {
                let m = baseline::size_multiple(d.scales());
                (m, m)
            }
            Net::Stack(s) => s.spec().size_multiple(),
        }
    }

    pub fn min_size(&self) -> (usize, usize) {
        let (h, w) = self.size_multiple();
        match &self.net {
            Net::Dmsn(_) => (2 * h, 2 * w),
            Net::Stack(s) => s.spec().min_size(),
        }
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let (mh, mw) = self.size_multiple();
        let (nh, nw) = self.min_size();
        if shape.c() != self.spec.codec.in_channels {
            return Err(Error::ChannelMismatch {
                op: "model input",
                expected: self.spec.codec.in_channels,
                got: shape.c(),
            });
        }
        if shape.h() % mh != 0 || shape.w() % mw != 0 || shape.h() < nh || shape.w() < nw {
            return Err(Error::Geometry {
                op: "model input",
                reason: format!(
                    "{}x{} must be a multiple of {mh}x{mw} and at least {nh}x{nw} for {}",
                    shape.h(),
                    shape.w(),
                    self.spec.label()
                ),
            });
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundModel<T>> {
        Ok(match &self.net {
            Net::Stack(s) => BoundModel::Stack(s.bind(tape)?),
            Net::Dmsn(d) => BoundModel::Dmsn(d.bind(tape)?),
        })
    }

    /// Inference on an input of valid size, returning every intermediate map.
    pub fn forward(&self, b1: &Tensor<T>) -> Result<(Tensor<T>, Forward<T>)> {
        self.check_input(b1.shape())?;
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape)?;
        let x = tape.leaf(b1.clone());
        let fwd = bound.forward(&mut tape, &x)?;
        Ok((fwd.output().value().clone(), fwd))
    }

    /// Zeroes the last layer of every decoder, making the model an identity
    /// map when the top residual is on.
    pub fn zero_decoder_heads(&mut self) {
        self.pairs_mut().into_iter().for_each(CodecPair::zero_head);
    }

    /// Reflect-pads `x` to a valid size.
    pub fn pad(&self, x: &Tensor<T>) -> Result<(Tensor<T>, CropBox)> {
        let (mh, mw) = self.size_multiple();
        let (nh, nw) = self.min_size();
        let s = x.shape();
        pad_reflect(x, valid_len(s.h(), mh, nh), valid_len(s.w(), mw, nw))
    }

    /// Deblurs an image of any size by padding, running, and cropping back.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer_with_levels(x)?.0)
    }

    /// Like [`Model::infer`], also returning the last unit's per-level
    /// residual maps reassembled to full images (level 1 first, cropped).
    /// For the multi-scale model these are the per-scale outputs at their
    /// own resolution.
    pub fn infer_with_levels(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let (padded, cb) = self.pad(x)?;
        let (y, fwd) = self.forward(&padded)?;
        let pass = &fwd.units.last().expect("at least one unit").up;
        let maps = level_maps(pass, &self.net)?
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                let shrink = match self.net {
                    Net::Dmsn(_) => i,
                    Net::Stack(_) => 0,
                };
                let b = CropBox {
                    h: cb.h.div_ceil(1 << shrink),
                    w: cb.w.div_ceil(1 << shrink),
                };
                crop(&m, b)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((crop(&y, cb)?, maps))
    }
}

fn level_maps<T: Scalar>(pass: &Pass<T>, net: &Net<T>) -> Result<Vec<Tensor<T>>> {
    let grids: Vec<(usize, usize)> = match net {
        Net::Dmsn(d) => vec![(1, 1); d.scales()],
        Net::Stack(s) => {
            let g = s.spec().grids();
            (0..g.len()).map(|i| if i == 0 { (1, 1) } else { g[i - 1] }).collect()
        }
    };
    let mut tape = Tape::inference();
    pass.levels
        .iter()
        .zip(grids)
        .map(|(l, (r, c))| {
            let parts: Vec<Var<T>> = l.s.iter().map(|v| tape.leaf(v.value().clone())).collect();
            Ok(tape.concat_grid(&parts, r, c)?.value().clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_round_trip_through_strings_and_json() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{k}\""));
        }
        assert!("dmphnx".parse::<ModelKind>().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::dmphn("1-2-4").validate().is_ok());
        let mut s = ModelSpec::dmphn("1-2");
        s.stack = 2;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::dmphn("1-2");
        s.scales = 2;
        assert!(s.validate().is_err());
        assert!(ModelSpec::dmsn(4).validate().is_err());
        assert!(ModelSpec::dmphn("1-3").validate().is_err());
        assert!(ModelSpec::stack_dmphn("1-2", 0).validate().is_err());
    }

    #[test]
    fn spec_json_defaults() {
        let s: ModelSpec = serde_json::from_str(r#"{"kind":"vmphn","pattern":"1-2"}"#).unwrap();
        assert_eq!(s, ModelSpec::vmphn("1-2"));
    }

    #[test]
    fn names_are_unique_and_prefixed() {
        let m = Model::<f32>::init(&ModelSpec::stack_vmphn("1-2", 2).with_codec(CodecConfig::desk()), 0).unwrap();
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(names[0], "m1.down.l1.enc.0.weight");
        assert!(names.iter().any(|n| n == "m2.up.l2.dec.14.bias"));
        let d = Model::<f32>::init(&ModelSpec::dmphn("1-2").with_weight_sharing(true), 0).unwrap();
        assert_eq!(d.named_params()[0].0, "shared.enc.0.weight");
        assert_eq!(Model::<f32>::init(&ModelSpec::dmsn(2), 0).unwrap().named_params()[0].0, "s1.enc.0.weight");
    }

    #[test]
    fn infer_pads_and_crops() {
        let m = Model::<f32>::init(&ModelSpec::dmphn("1-2").with_codec(CodecConfig::desk()), 0).unwrap();
        let x = Tensor::full(Shape::new(1, 3, 13, 21), 0.1);
        let (y, maps) = m.infer_with_levels(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(maps.len(), 2);
        assert!(maps.iter().all(|t| t.shape() == x.shape()));
    }
}
