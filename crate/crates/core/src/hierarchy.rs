//! Multi-patch hierarchy: pattern parsing, patch grids and the bottom-up
//! forward pass.
//!
//! Level 1 (index 0) sees the whole image; level `i` splits it into
//! `counts[i]` non-overlapping patches. Processing starts at the finest level.
//! Each level encodes its patches (plus the residual image coming from the
//! level below), adds the regrouped features of the level below, then
//! regroups its own features to the parent grid and decodes them into a
//! residual image for the level above.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::blocks::{init_params, BoundCodec, CodecConfig, CodecPair};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tape, Tensor, Var};

/// Axis cut by the first two-way split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitAxis {
    /// Top and bottom halves.
    #[default]
    Height,
    /// Left and right halves.
    Width,
}

/// Parsed patch pattern with the grid used at every level.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HierarchySpec {
    counts: Vec<usize>,
    grids: Vec<(usize, usize)>,
    first_axis: SplitAxis,
}

impl fmt::Display for HierarchySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.counts.iter().map(|c| c.to_string()).collect();
        f.write_str(&parts.join("-"))
    }
}

/// Parses `"1-2-4-8"` (surrounding parentheses optional) with height-first splits.
pub fn parse_pattern(text: &str) -> Result<HierarchySpec> {
    parse_pattern_with(text, SplitAxis::Height)
}

pub fn parse_pattern_with(text: &str, first_axis: SplitAxis) -> Result<HierarchySpec> {
    let err = |reason: String| Error::Pattern {
        text: text.to_string(),
        reason,
    };
    let mut body = text.trim();
    if let Some(inner) = body.strip_prefix('(') {
        body = inner
            .strip_suffix(')')
            .ok_or_else(|| err("unbalanced parenthesis".into()))?
            .trim();
    }
    if body.is_empty() {
        return Err(err("empty pattern".into()));
    }
    let counts = body
        .split('-')
        .map(|p| match p.trim().parse::<usize>() {
            Ok(v) if v > 0 => Ok(v),
            _ => Err(err(format!("{:?} is not a positive integer", p.trim()))),
        })
        .collect::<Result<Vec<_>>>()?;
    HierarchySpec::from_counts(&counts, first_axis).map_err(|e| match e {
        Error::Pattern { reason, .. } => err(reason),
        other => other,
    })
}

impl HierarchySpec {
    pub fn from_counts(counts: &[usize], first_axis: SplitAxis) -> Result<Self> {
        let err = |reason: String| Error::Pattern {
            text: counts
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join("-"),
            reason,
        };
        match counts.first() {
            None => return Err(err("empty pattern".into())),
            Some(&1) => {}
            Some(&c) => return Err(err(format!("first level must have 1 patch, got {c}"))),
        }
        let mut grids = vec![(1, 1)];
        let mut height_next = first_axis == SplitAxis::Height;
        for (i, pair) in counts.windows(2).enumerate() {
            let (rows, cols) = grids[i];
            let ratio = if pair[1] % pair[0] == 0 { pair[1] / pair[0] } else { 0 };
            let grid = match ratio {
                1 => (rows, cols),
                2 => {
                    let g = if height_next { (rows * 2, cols) } else { (rows, cols * 2) };
                    height_next = !height_next;
                    g
                }
                4 => (rows * 2, cols * 2),
                _ => {
                    return Err(err(format!(
                        "ratio must be 1, 2, or 4 (levels {} and {} have {} and {} patches)",
                        i + 1,
                        i + 2,
                        pair[0],
                        pair[1]
                    )))
                }
            };
            grids.push(grid);
        }
        Ok(HierarchySpec {
            counts: counts.to_vec(),
            grids,
            first_axis,
        })
    }

    pub fn levels(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `(rows, cols)` patch grid per level, level 1 first.
    pub fn grids(&self) -> &[(usize, usize)] {
        &self.grids
    }

    pub fn first_axis(&self) -> SplitAxis {
        self.first_axis
    }

    /// Grid with the most rows and columns, which every other grid divides.
    pub fn finest_grid(&self) -> (usize, usize) {
        *self.grids.last().expect("at least one level")
    }

    /// Input height and width must be multiples of these.
    pub fn size_multiple(&self) -> (usize, usize) {
        let (r, c) = self.finest_grid();
        (r * CodecConfig::DOWNSAMPLE, c * CodecConfig::DOWNSAMPLE)
    }

    /// Smallest accepted input height and width.
    pub fn min_size(&self) -> (usize, usize) {
        let (r, c) = self.finest_grid();
        (r * 2 * CodecConfig::DOWNSAMPLE, c * 2 * CodecConfig::DOWNSAMPLE)
    }

    pub fn check_input(&self, shape: Shape) -> Result<()> {
        let (mh, mw) = self.size_multiple();
        let (nh, nw) = self.min_size();
        if shape.h() % mh != 0 || shape.w() % mw != 0 || shape.h() < nh || shape.w() < nw {
            return Err(Error::Geometry {
                op: "hierarchy",
                reason: format!(
                    "input {}x{} must be a multiple of {mh}x{mw} and at least {nh}x{nw} for pattern {self}",
                    shape.h(),
                    shape.w()
                ),
            });
        }
        Ok(())
    }
}

/// Region of a padded tensor holding the original image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub h: usize,
    pub w: usize,
}

/// Index into `0..len` after mirror reflection (edge sample not repeated).
fn reflect(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Smallest size `>= len` that is a multiple of `multiple` and at least `min`.
pub fn valid_len(len: usize, multiple: usize, min: usize) -> usize {
    len.max(min).div_ceil(multiple) * multiple
}

/// Reflect-pads the bottom and right edges up to `h x w`.
pub fn pad_reflect<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<(Tensor<T>, CropBox)> {
    let s = x.shape();
    if h < s.h() || w < s.w() || s.h() == 0 || s.w() == 0 {
        return Err(Error::Geometry {
            op: "pad_reflect",
            reason: format!("cannot pad {}x{} to {h}x{w}", s.h(), s.w()),
        });
    }
    let crop = CropBox { h: s.h(), w: s.w() };
    if (h, w) == (s.h(), s.w()) {
        return Ok((x.clone(), crop));
    }
    let src = x.data();
    let mut out = Vec::with_capacity(s.n() * s.c() * h * w);
    for plane in src.chunks_exact(s.plane()) {
        for r in 0..h {
            let row = &plane[reflect(r, s.h()) * s.w()..][..s.w()];
            out.extend((0..w).map(|c| row[reflect(c, s.w())]));
        }
    }
    Ok((Tensor::from_vec(s.with_hw(h, w), out)?, crop))
}

/// Reflect-pads `x` to the smallest size the hierarchy accepts.
pub fn pad_to_valid<T: Scalar>(x: &Tensor<T>, spec: &HierarchySpec) -> Result<(Tensor<T>, CropBox)> {
    let (mh, mw) = spec.size_multiple();
    let (nh, nw) = spec.min_size();
    let s = x.shape();
    pad_reflect(x, valid_len(s.h(), mh, nh), valid_len(s.w(), mw, nw))
}

/// Top-left `box.h x box.w` window of `x`.
pub fn crop<T: Scalar>(x: &Tensor<T>, b: CropBox) -> Result<Tensor<T>> {
    let s = x.shape();
    if b.h > s.h() || b.w > s.w() {
        return Err(Error::Geometry {
            op: "crop",
            reason: format!("box {}x{} exceeds {}x{}", b.h, b.w, s.h(), s.w()),
        });
    }
    if (b.h, b.w) == (s.h(), s.w()) {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(s.n() * s.c() * b.h * b.w);
    for plane in x.data().chunks_exact(s.plane()) {
        for r in 0..b.h {
            out.extend_from_slice(&plane[r * s.w()..][..b.w]);
        }
    }
    Tensor::from_vec(s.with_hw(b.h, b.w), out)
}

/// Reassembles patches laid out on grid `from` and cuts them along grid `to`.
pub fn regroup<T: Scalar>(
    tape: &mut Tape<T>,
    patches: &[Var<T>],
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Vec<Var<T>>> {
    if from == to {
        return Ok(patches.to_vec());
    }
    let whole = tape.concat_grid(patches, from.0, from.1)?;
    tape.split_grid(&whole, to.0, to.1)
}

/// Tensors recorded at one level during a forward pass.
#[derive(Clone, Debug)]
pub struct LevelVars<T> {
    /// Input patches `B`, on this level's grid.
    pub b: Vec<Var<T>>,
    /// Encoder outputs after adding the features from below, on this level's grid.
    pub c: Vec<Var<T>>,
    /// `c` regrouped onto the parent grid (the whole image at level 1).
    pub c_star: Vec<Var<T>>,
    /// Decoder outputs on the parent grid. At level 1 this is the model output.
    pub s: Vec<Var<T>>,
}

/// Values of [`LevelVars`] detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTrace<T> {
    pub b: Vec<Tensor<T>>,
    pub c: Vec<Tensor<T>>,
    pub c_star: Vec<Tensor<T>>,
    pub s: Vec<Tensor<T>>,
}

impl<T: Scalar> LevelVars<T> {
    pub fn trace(&self) -> LevelTrace<T> {
        let v = |xs: &[Var<T>]| xs.iter().map(|x| x.value().clone()).collect();
        LevelTrace {
            b: v(&self.b),
            c: v(&self.c),
            c_star: v(&self.c_star),
            s: v(&self.s),
        }
    }
}

/// Extra per-level inputs added into a pass, both on that level's grid:
/// `images` to the encoder inputs and `features` to the encoder outputs.
#[derive(Clone, Debug)]
pub struct Carry<T> {
    pub images: Vec<Option<Vec<Var<T>>>>,
    pub features: Vec<Option<Vec<Var<T>>>>,
}

impl<T: Scalar> Carry<T> {
    pub fn empty(levels: usize) -> Self {
        Carry {
            images: vec![None; levels],
            features: vec![None; levels],
        }
    }
}

/// Result of one hierarchy pass.
#[derive(Clone, Debug)]
pub struct Pass<T> {
    pub output: Var<T>,
    /// Level 1 first.
    pub levels: Vec<LevelVars<T>>,
}

impl<T: Scalar> Pass<T> {
    pub fn trace(&self) -> Vec<LevelTrace<T>> {
        self.levels.iter().map(LevelVars::trace).collect()
    }
}

fn add_all<T: Scalar>(tape: &mut Tape<T>, xs: &[Var<T>], ys: &[Var<T>]) -> Result<Vec<Var<T>>> {
    if xs.len() != ys.len() {
        return Err(Error::Model(format!(
            "cannot add {} patches to {} patches",
            ys.len(),
            xs.len()
        )));
    }
    xs.iter().zip(ys).map(|(x, y)| tape.add(x, y)).collect()
}

/// Bottom-up pass over `spec` with `codec(level)` giving each level's pair.
///
/// Returns the level-1 decoder output plus, when `top_residual` is set,
/// `b1` itself.
pub fn hierarchy_pass<'a, T: Scalar>(
    tape: &mut Tape<T>,
    spec: &HierarchySpec,
    codec: impl Fn(usize) -> &'a BoundCodec<T>,
    b1: &Var<T>,
    top_residual: bool,
    carry: Option<&Carry<T>>,
) -> Result<Pass<T>>
where
    T: 'a,
{
    spec.check_input(b1.shape())?;
    let grids = spec.grids();
    let levels = spec.levels();
    let mut out: Vec<Option<LevelVars<T>>> = vec![None; levels];
    // residual images and features coming up from the level below, on this level's grid
    let mut s_below: Option<Vec<Var<T>>> = None;
    let mut c_below: Option<Vec<Var<T>>> = None;

    for lvl in (0..levels).rev() {
        let pair = codec(lvl);
        let b = tape.split_grid(b1, grids[lvl].0, grids[lvl].1)?;
        let mut inputs = b.clone();
        if let Some(s) = &s_below {
            inputs = add_all(tape, &inputs, s)?;
        }
        if let Some(extra) = carry.and_then(|c| c.images[lvl].as_ref()) {
            inputs = add_all(tape, &inputs, extra)?;
        }
        let mut c = inputs
            .iter()
            .map(|x| pair.encode(tape, x))
            .collect::<Result<Vec<_>>>()?;
        if let Some(f) = &c_below {
            c = add_all(tape, &c, f)?;
        }
        if let Some(extra) = carry.and_then(|c| c.features[lvl].as_ref()) {
            c = add_all(tape, &c, extra)?;
        }
        let parent = if lvl == 0 { (1, 1) } else { grids[lvl - 1] };
        let c_star = regroup(tape, &c, grids[lvl], parent)?;
        let mut s = c_star
            .iter()
            .map(|x| pair.decode(tape, x))
            .collect::<Result<Vec<_>>>()?;
        if lvl == 0 && top_residual {
            s[0] = tape.add(&s[0], b1)?;
        }
        s_below = Some(s.clone());
        c_below = Some(c_star.clone());
        out[lvl] = Some(LevelVars { b, c, c_star, s });
    }
    let levels: Vec<LevelVars<T>> = out.into_iter().map(|l| l.expect("every level visited")).collect();
    Ok(Pass {
        output: levels[0].s[0].clone(),
        levels,
    })
}

/// Level-1 training objective: `mse_half(s1, g)`.
pub fn loss<T: Scalar>(tape: &mut Tape<T>, s1: &Var<T>, g: &Var<T>) -> Result<Var<T>> {
    tape.mse_half(s1, g)
}

/// 64-bit mix of `seed` and `index`, used to derive independent per-pair seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Codec layout for a level; only the level-1 decoder may change the planes it emits.
pub(crate) fn level_config(config: &CodecConfig, level: usize) -> CodecConfig {
    if level == 0 {
        config.clone()
    } else {
        config.with_out_channels(config.in_channels)
    }
}

/// A single multi-patch hierarchy with one codec pair per level, or one
/// shared pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DmphnModel<T> {
    pub spec: HierarchySpec,
    pub codecs: Vec<CodecPair<T>>,
    pub weight_sharing: bool,
    pub top_residual: bool,
}

impl<T: Scalar> DmphnModel<T> {
    /// Fresh model; pair `k` is drawn from `derive_seed(seed, first_index + k)`.
    pub fn init(
        spec: HierarchySpec,
        config: &CodecConfig,
        weight_sharing: bool,
        top_residual: bool,
        seed: u64,
        first_index: u64,
    ) -> Result<Self> {
        if top_residual && config.out_channels != config.in_channels {
            return Err(Error::Config(format!(
                "the level-1 residual needs matching channels, got {} in and {} out",
                config.in_channels, config.out_channels
            )));
        }
        if weight_sharing && config.out_channels != config.in_channels {
            return Err(Error::Config(
                "a shared codec pair cannot change the output channel count".into(),
            ));
        }
        let n = if weight_sharing { 1 } else { spec.levels() };
        let codecs = (0..n)
            .map(|k| init_params(&level_config(config, k), derive_seed(seed, first_index + k as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DmphnModel {
            spec,
            codecs,
            weight_sharing,
            top_residual,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let want = if self.weight_sharing { 1 } else { self.spec.levels() };
        if self.codecs.len() != want {
            return Err(Error::Model(format!(
                "pattern {} needs {want} codec pairs, model has {}",
                self.spec,
                self.codecs.len()
            )));
        }
        Ok(())
    }

    pub fn codec_index(&self, level: usize) -> usize {
        if self.weight_sharing {
            0
        } else {
            level
        }
    }

    pub fn param_count(&self) -> usize {
        self.codecs.iter().map(CodecPair::param_count).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundDmphn<T>> {
        self.validate()?;
        Ok(BoundDmphn {
            spec: self.spec.clone(),
            codecs: self.codecs.iter().map(|c| c.bind(tape)).collect(),
            weight_sharing: self.weight_sharing,
            top_residual: self.top_residual,
        })
    }

    /// Inference pass returning the output and per-level trace.
    pub fn forward(&self, b1: &Tensor<T>) -> Result<(Tensor<T>, Vec<LevelTrace<T>>)> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape)?;
        let x = tape.leaf(b1.clone());
        let pass = bound.forward(&mut tape, &x, None)?;
        Ok((pass.output.value().clone(), pass.trace()))
    }

    /// FLOPs per level for an `n x C x h x w` input, level 1 first: encoder
    /// over the level's patches, decoder over the parent patches and the
    /// elementwise adds between them.
    pub fn level_flops(&self, n: usize, h: usize, w: usize) -> Result<Vec<u64>> {
        self.spec.check_input(Shape::new(n, self.codecs[0].config.in_channels, h, w))?;
        let grids = self.spec.grids();
        (0..self.spec.levels())
            .map(|lvl| {
                let pair = &self.codecs[self.codec_index(lvl)];
                let cfg = &pair.config;
                let (r, c) = grids[lvl];
                let patch = Shape::new(n, cfg.in_channels, h / r, w / c);
                let (feat, enc) = pair.encoder_flops(patch)?;
                let (pr, pc) = if lvl == 0 { (1, 1) } else { grids[lvl - 1] };
                let parent_feat = feat.with_hw(h / pr / CodecConfig::DOWNSAMPLE, w / pc / CodecConfig::DOWNSAMPLE);
                let (img, dec) = pair.decoder_flops(parent_feat)?;
                let count = (r * c) as u64;
                let parents = (pr * pc) as u64;
                let mut adds = 0u64;
                if lvl + 1 < self.spec.levels() {
                    adds += count * (patch.numel() + feat.numel()) as u64;
                }
                if lvl == 0 && self.top_residual {
                    adds += img.numel() as u64;
                }
                Ok(count * enc + parents * dec + adds)
            })
            .collect()
    }

    /// Zeroes the last layer of every decoder.
    pub fn zero_decoder_heads(&mut self) {
        self.codecs.iter_mut().for_each(CodecPair::zero_head);
    }
}

/// A [`DmphnModel`] bound to a tape.
#[derive(Clone, Debug)]
pub struct BoundDmphn<T> {
    pub spec: HierarchySpec,
    pub codecs: Vec<BoundCodec<T>>,
    pub weight_sharing: bool,
    pub top_residual: bool,
}

impl<T: Scalar> BoundDmphn<T> {
    pub fn codec(&self, level: usize) -> &BoundCodec<T> {
        &self.codecs[if self.weight_sharing { 0 } else { level }]
    }

    pub fn forward(&self, tape: &mut Tape<T>, b1: &Var<T>, carry: Option<&Carry<T>>) -> Result<Pass<T>> {
        hierarchy_pass(tape, &self.spec, |l| self.codec(l), b1, self.top_residual, carry)
    }

    pub fn vars(&self) -> Vec<&Var<T>> {
        self.codecs.iter().flat_map(BoundCodec::vars).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-0.5..0.5))
    }

    #[test]
    fn parses_patterns() {
        let s = parse_pattern("1-2-4-8").unwrap();
        assert_eq!(s.counts(), &[1, 2, 4, 8]);
        assert_eq!(s.grids(), &[(1, 1), (2, 1), (2, 2), (4, 2)]);
        assert_eq!(parse_pattern("(1-4-16)").unwrap().grids(), &[(1, 1), (2, 2), (4, 4)]);
        assert_eq!(parse_pattern("1").unwrap().grids(), &[(1, 1)]);
        assert_eq!(parse_pattern("1-1-1").unwrap().grids(), &[(1, 1); 3]);
        let w = parse_pattern_with("1-2-4", SplitAxis::Width).unwrap();
        assert_eq!(w.grids(), &[(1, 1), (1, 2), (2, 2)]);
        assert_eq!(s.to_string(), "1-2-4-8");
    }

    #[test]
    fn rejects_bad_patterns() {
        for bad in ["", "2-4", "1-3", "1-2-3", "1-8", "1--2", "a-2", "(1-2", "1-0"] {
            assert!(parse_pattern(bad).is_err(), "{bad:?}");
        }
        let e = parse_pattern("1-3").unwrap_err().to_string();
        assert!(e.contains("ratio must be 1, 2, or 4"), "{e}");
    }

    #[test]
    fn pad_and_crop_round_trip() {
        let spec = parse_pattern("1-2-4-8").unwrap();
        let x = random(Shape::new(1, 2, 19, 13), 1);
        let (p, b) = pad_to_valid(&x, &spec).unwrap();
        assert_eq!(p.shape(), Shape::new(1, 2, 32, 16));
        assert_eq!(crop(&p, b).unwrap(), x);
        assert_eq!(p.at(0, 1, 19, 0), x.at(0, 1, 17, 0));
        assert_eq!(p.at(0, 0, 0, 13), x.at(0, 0, 0, 11));
        let ok = random(Shape::new(1, 3, 64, 32), 2);
        let (q, b) = pad_to_valid(&ok, &spec).unwrap();
        assert_eq!(q, ok);
        assert_eq!(b, CropBox { h: 64, w: 32 });
    }

    #[test]
    fn reflect_folds_long_pads() {
        let idx: Vec<usize> = (0..9).map(|i| reflect(i, 3)).collect();
        assert_eq!(idx, [0, 1, 2, 1, 0, 1, 2, 1, 0]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn single_level_is_residual_codec() {
        let spec = parse_pattern("1").unwrap();
        let m = DmphnModel::<f64>::init(spec, &CodecConfig::desk(), false, true, 3, 0).unwrap();
        let x = random(Shape::new(1, 3, 16, 16), 4);
        let (y, _) = m.forward(&x).unwrap();
        let mut tape = Tape::inference();
        let c = m.codecs[0].bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let f = c.encode(&mut tape, &xv).unwrap();
        let g = c.decode(&mut tape, &f).unwrap();
        let want = g.value().zip_map(&x, |a, b| a + b).unwrap();
        assert_eq!(y, want);
    }

    #[test]
    fn rejects_invalid_input_sizes() {
        let m = DmphnModel::<f32>::init(parse_pattern("1-2").unwrap(), &CodecConfig::desk(), false, true, 0, 0)
            .unwrap();
        assert!(m.forward(&Tensor::zeros(Shape::new(1, 3, 12, 16))).is_err());
        assert!(m.forward(&Tensor::zeros(Shape::new(1, 3, 8, 8))).is_err());
        assert!(m.forward(&Tensor::zeros(Shape::new(1, 3, 16, 8))).is_ok());
    }

    #[test]
    fn derive_seed_separates_indices() {
        assert_ne!(derive_seed(0, 0), derive_seed(0, 1));
        assert_ne!(derive_seed(0, 0), derive_seed(1, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
