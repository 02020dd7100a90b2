//! Horizontally stacked hierarchies and the v-shaped unit.
//!
//! A stack chains units: unit `m` takes unit `m - 1`'s output image as its
//! input and receives its intermediate maps additively. At level `l` (except
//! the finest) the residual images `S` and regrouped features `C*` that the
//! previous unit produced one level below are added to the patch inputs and
//! encoder outputs respectively, the same way levels feed each other inside a
//! unit.
//!
//! A v-shaped unit first runs a downward arm from the whole image to the
//! finest grid (each level splitting and adding the coarser level's residual
//! image and features), then an upward hierarchy pass that adds the downward
//! arm's level-matched maps. The arms do not share weights.

use crate::blocks::{BoundCodec, CodecConfig};
use crate::error::{Error, Result};
use crate::hierarchy::{regroup, BoundDmphn, Carry, DmphnModel, HierarchySpec, LevelVars, Pass};
use crate::tensor::{Scalar, Shape, Tape, Var};

/// One link of a stack: an optional downward arm and the upward hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct Unit<T> {
    pub down: Option<DmphnModel<T>>,
    pub up: DmphnModel<T>,
}

impl<T: Scalar> Unit<T> {
    pub fn param_count(&self) -> usize {
        self.up.param_count() + self.down.as_ref().map_or(0, DmphnModel::param_count)
    }
}

/// Sequence of units sharing one pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct StackModel<T> {
    pub units: Vec<Unit<T>>,
}

impl<T: Scalar> StackModel<T> {
    /// `n` units; unit `m` draws its pairs from indices starting at
    /// `m * arms * levels`, the downward arm first.
    pub fn init(
        spec: &HierarchySpec,
        config: &CodecConfig,
        n: usize,
        v_shaped: bool,
        weight_sharing: bool,
        top_residual: bool,
        seed: u64,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("a stack needs at least one unit".into()));
        }
        let per_arm = if weight_sharing { 1 } else { spec.levels() } as u64;
        let arms = if v_shaped { 2 } else { 1 };
        let units = (0..n as u64)
            .map(|m| {
                let base = m * arms * per_arm;
                let down = if v_shaped {
                    let down_cfg = config.with_out_channels(config.in_channels);
                    Some(DmphnModel::init(spec.clone(), &down_cfg, weight_sharing, false, seed, base)?)
                } else {
                    None
                };
                let up_base = base + (arms - 1) * per_arm;
                let up = DmphnModel::init(spec.clone(), config, weight_sharing, top_residual, seed, up_base)?;
                Ok(Unit { down, up })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StackModel { units })
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .units
            .first()
            .ok_or_else(|| Error::Model("stack has no units".into()))?;
        for u in &self.units {
            u.up.validate()?;
            if u.up.spec != first.up.spec {
                return Err(Error::Model(format!(
                    "stacked units disagree on pattern: {} vs {}",
                    first.up.spec, u.up.spec
                )));
            }
            if let Some(d) = &u.down {
                d.validate()?;
                if d.spec != u.up.spec {
                    return Err(Error::Model("v-shaped arms disagree on pattern".into()));
                }
            }
            if u.down.is_some() != first.down.is_some() {
                return Err(Error::Model("stack mixes unit kinds".into()));
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &HierarchySpec {
        &self.units[0].up.spec
    }

    pub fn param_count(&self) -> usize {
        self.units.iter().map(Unit::param_count).sum()
    }

    /// FLOPs per level summed over units and arms, level 1 first. Carried
    /// maps cost one add per element for every source merged in.
    pub fn level_flops(&self, n: usize, h: usize, w: usize) -> Result<Vec<u64>> {
        let spec = self.spec();
        let levels = spec.levels();
        let grids = spec.grids();
        let mut total = vec![0u64; levels];
        for (m, unit) in self.units.iter().enumerate() {
            for (lvl, f) in unit.up.level_flops(n, h, w)?.into_iter().enumerate() {
                total[lvl] += f;
            }
            for (lvl, &(rows, cols)) in grids.iter().enumerate() {
                let pair = &unit.up.codecs[unit.up.codec_index(lvl)];
                let patch = Shape::new(n, pair.config.in_channels, h / rows, w / cols);
                let (feat, _) = pair.encoder_flops(patch)?;
                let per_source = ((rows * cols) * (patch.numel() + feat.numel())) as u64;
                let sources = u64::from(unit.down.is_some()) + u64::from(m > 0 && lvl + 1 < levels);
                total[lvl] += sources * per_source;
                if let Some(down) = &unit.down {
                    let pair = &down.codecs[down.codec_index(lvl)];
                    let (feat, enc) = pair.encoder_flops(patch)?;
                    let (_, dec) = pair.decoder_flops(feat)?;
                    let count = (rows * cols) as u64;
                    total[lvl] += count * (enc + dec);
                    if lvl > 0 {
                        total[lvl] += count * (patch.numel() + feat.numel()) as u64;
                    }
                }
            }
        }
        Ok(total)
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Result<BoundStack<T>> {
        self.validate()?;
        let units = self
            .units
            .iter()
            .map(|u| {
                Ok(BoundUnit {
                    down: u.down.as_ref().map(|d| d.bind(tape)).transpose()?,
                    up: u.up.bind(tape)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundStack { units })
    }
}

#[derive(Clone, Debug)]
pub struct BoundUnit<T> {
    pub down: Option<BoundDmphn<T>>,
    pub up: BoundDmphn<T>,
}

#[derive(Clone, Debug)]
pub struct BoundStack<T> {
    pub units: Vec<BoundUnit<T>>,
}

/// Everything a unit computed.
#[derive(Clone, Debug)]
pub struct UnitPass<T> {
    pub down: Option<Pass<T>>,
    pub up: Pass<T>,
}

impl<T: Scalar> BoundStack<T> {
    /// Runs every unit in order; the last unit's output is the result.
    pub fn forward(&self, tape: &mut Tape<T>, b1: &Var<T>) -> Result<Vec<UnitPass<T>>> {
        let mut passes: Vec<UnitPass<T>> = Vec::with_capacity(self.units.len());
        let mut input = b1.clone();
        for unit in &self.units {
            let from_prev = passes.last().map(|p| stack_carry(&p.up));
            let pass = unit_forward(tape, unit, &input, from_prev)?;
            input = pass.up.output.clone();
            passes.push(pass);
        }
        Ok(passes)
    }

    pub fn vars(&self) -> Vec<&Var<T>> {
        self.units
            .iter()
            .flat_map(|u| u.down.iter().flat_map(BoundDmphn::vars).chain(u.up.vars()))
            .collect()
    }
}

/// What a unit hands to its successor: at level `l < L`, the previous
/// unit's `S` and `C*` from level `l + 1`.
pub fn stack_carry<T: Scalar>(prev: &Pass<T>) -> Carry<T> {
    let n = prev.levels.len();
    let mut carry = Carry::empty(n);
    for lvl in 0..n.saturating_sub(1) {
        let below = &prev.levels[lvl + 1];
        carry.images[lvl] = Some(below.s.clone());
        carry.features[lvl] = Some(below.c_star.clone());
    }
    carry
}

fn merge_slot<T: Scalar>(
    tape: &mut Tape<T>,
    a: Option<Vec<Var<T>>>,
    b: Option<Vec<Var<T>>>,
) -> Result<Option<Vec<Var<T>>>> {
    match (a, b) {
        (Some(a), Some(b)) => Ok(Some(
            a.iter().zip(&b).map(|(x, y)| tape.add(x, y)).collect::<Result<_>>()?,
        )),
        (a, b) => Ok(a.or(b)),
    }
}

fn merge<T: Scalar>(tape: &mut Tape<T>, a: Carry<T>, b: Option<Carry<T>>) -> Result<Carry<T>> {
    let Some(b) = b else { return Ok(a) };
    let images = a
        .images
        .into_iter()
        .zip(b.images)
        .map(|(x, y)| merge_slot(tape, x, y))
        .collect::<Result<_>>()?;
    let features = a
        .features
        .into_iter()
        .zip(b.features)
        .map(|(x, y)| merge_slot(tape, x, y))
        .collect::<Result<_>>()?;
    Ok(Carry { images, features })
}

fn unit_forward<T: Scalar>(
    tape: &mut Tape<T>,
    unit: &BoundUnit<T>,
    input: &Var<T>,
    from_prev: Option<Carry<T>>,
) -> Result<UnitPass<T>> {
    match &unit.down {
        None => {
            let up = unit.up.forward(tape, input, from_prev.as_ref())?;
            Ok(UnitPass { down: None, up })
        }
        Some(down) => {
            let d = down_pass(tape, &down.spec, |l| down.codec(l), input)?;
            let mut carry = Carry::empty(d.levels.len());
            for (lvl, l) in d.levels.iter().enumerate() {
                carry.images[lvl] = Some(l.s.clone());
                carry.features[lvl] = Some(l.c.clone());
            }
            let carry = merge(tape, carry, from_prev)?;
            let up = unit.up.forward(tape, input, Some(&carry))?;
            Ok(UnitPass { down: Some(d), up })
        }
    }
}

/// Top-down arm: level `l` encodes its patches plus the split residual image
/// of level `l - 1`, adds the split features of level `l - 1`, and decodes
/// each patch in place. `c_star` equals `c` at every level.
pub fn down_pass<'a, T: Scalar>(
    tape: &mut Tape<T>,
    spec: &HierarchySpec,
    codec: impl Fn(usize) -> &'a BoundCodec<T>,
    b1: &Var<T>,
) -> Result<Pass<T>>
where
    T: 'a,
{
    spec.check_input(b1.shape())?;
    let grids = spec.grids();
    let mut levels: Vec<LevelVars<T>> = Vec::with_capacity(spec.levels());
    for lvl in 0..spec.levels() {
        let pair = codec(lvl);
        let b = tape.split_grid(b1, grids[lvl].0, grids[lvl].1)?;
        let mut inputs = b.clone();
        if let Some(above) = levels.last() {
            let s = regroup(tape, &above.s, grids[lvl - 1], grids[lvl])?;
            inputs = inputs.iter().zip(&s).map(|(x, y)| tape.add(x, y)).collect::<Result<_>>()?;
        }
        let mut c = inputs
            .iter()
            .map(|x| pair.encode(tape, x))
            .collect::<Result<Vec<_>>>()?;
        if let Some(above) = levels.last() {
            let f = regroup(tape, &above.c, grids[lvl - 1], grids[lvl])?;
            c = c.iter().zip(&f).map(|(x, y)| tape.add(x, y)).collect::<Result<_>>()?;
        }
        let s = c.iter().map(|x| pair.decode(tape, x)).collect::<Result<Vec<_>>>()?;
        levels.push(LevelVars {
            b,
            c_star: c.clone(),
            c,
            s,
        });
    }
    Ok(Pass {
        output: levels[0].s[0].clone(),
        levels,
    })
}

/// Sum of the level-1 objective over every unit output.
pub fn stacked_loss<T: Scalar>(tape: &mut Tape<T>, outputs: &[Var<T>], g: &Var<T>) -> Result<Var<T>> {
    let mut total: Option<Var<T>> = None;
    for s in outputs {
        let t = tape.mse_half(s, g)?;
        total = Some(match total {
            None => t,
            Some(acc) => tape.add(&acc, &t)?,
        });
    }
    total.ok_or_else(|| Error::Model("no outputs to score".into()))
}
