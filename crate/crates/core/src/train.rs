//! Adam, the step-decay schedule, batch preparation and the training loop.
//!
//! Batch order and crop windows are drawn from streams keyed by
//! `(seed, epoch)` and `(seed, step)`, so a run resumed from a checkpoint
//! makes exactly the draws the uninterrupted run would have made.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta, Storable, StoredTensor};
use crate::data::Pair;
use crate::error::{Error, Result};
use crate::hierarchy::derive_seed;
use crate::model::{self, Model};
use crate::tensor::{DType, Scalar, Shape, Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Number of trailing steps averaged for the final smoothed loss.
pub const SMOOTHING_WINDOW: usize = 20;

const PERMUTATION_STREAM: u64 = 0x7065_726d;
const CROP_STREAM: u64 = 0x6372_6f70;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub crop: usize,
    pub lr0: f64,
    pub decay_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Element type of parameters and activations.
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    /// Stop after this many optimizer steps even if epochs remain.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Write a checkpoint every this many steps (and always at the end).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn default_dtype() -> DType {
    DType::F32
}

impl TrainConfig {
    /// Settings of the original recipe; far beyond a CPU budget.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 6,
            crop: 256,
            lr0: 1e-4,
            decay_rate: 0.1,
            epochs: 3000,
            seed: 0,
            dtype: DType::F32,
            max_steps: None,
            checkpoint_every: None,
        }
    }

    /// Small-crop CPU profile, used with the reduced-width codec.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 4,
            crop: 64,
            lr0: 1e-3,
            decay_rate: 0.1,
            epochs: 30,
            seed: 0,
            dtype: DType::F32,
            max_steps: None,
            checkpoint_every: None,
        }
    }

    pub fn validate<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        if self.batch_size == 0 || self.crop == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size, crop and epochs must be positive".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr0)));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::Config(format!("decay rate must lie in (0, 1], got {}", self.decay_rate)));
        }
        if self.dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "configured for {:?} but the model holds {:?}",
                self.dtype,
                T::DTYPE
            )));
        }
        let (mh, mw) = model.size_multiple();
        let (nh, nw) = model.min_size();
        if self.crop % mh != 0 || self.crop % mw != 0 || self.crop < nh.max(nw) {
            return Err(Error::Config(format!(
                "crop {} must be a multiple of {mh} and {mw} and at least {} for {}",
                self.crop,
                nh.max(nw),
                model.spec().label()
            )));
        }
        Ok(())
    }

    /// Epochs between decays; the rate is applied at 1/3 and 2/3 of the run.
    pub fn decay_period(&self) -> usize {
        (self.epochs / 3).max(1)
    }
}

/// `lr0 * decay_rate ^ floor(epoch / (epochs / 3))`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let k = (epoch / config.decay_period()) as i32;
    config.lr0 * config.decay_rate.powi(k)
}

/// Adam moments for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: impl IntoIterator<Item = Shape>) -> Self {
        let (m, v) = shapes.into_iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).unzip();
        AdamState { m, v, step: 0 }
    }
}

/// One Adam update with bias correction:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Model(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "adam gradient" });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(ADAM_BETA1);
    let b2 = T::from_f64_lossy(ADAM_BETA2);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - ADAM_BETA1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - ADAM_BETA2.powi(t));
    let eps = T::from_f64_lossy(ADAM_EPS);
    let lr = T::from_f64_lossy(lr);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mj = b1 * *mj + (one - b1) * gj;
            *vj = b2 * *vj + (one - b2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *pj = *pj - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Maps a `[0, 1]` image to the network range `[-0.5, 0.5]`.
pub fn normalize<T: Scalar>(img: &Tensor<f32>) -> Tensor<T> {
    Tensor::from_fn(img.shape(), |i| T::from_f64_lossy(f64::from(img.data()[i]) - 0.5))
}

/// Inverse of [`normalize`].
pub fn denormalize<T: Scalar>(x: &Tensor<T>) -> Tensor<f32> {
    Tensor::from_fn(x.shape(), |i| (x.data()[i].to_f64_lossy() + 0.5) as f32)
}

fn crop_window(img: &Tensor<f32>, top: usize, left: usize, size: usize) -> Tensor<f32> {
    let s = img.shape();
    let mut out = Vec::with_capacity(s.n() * s.c() * size * size);
    for plane in img.data().chunks_exact(s.plane()) {
        for r in top..top + size {
            out.extend_from_slice(&plane[r * s.w() + left..][..size]);
        }
    }
    Tensor::from_vec(Shape::new(s.n(), s.c(), size, size), out).expect("window inside image")
}

/// Crops the same random `crop x crop` window from each blurry/sharp pair and
/// normalises both. Returns `(blurry, sharp)` batches.
pub fn prepare_batch<T: Scalar>(pairs: &[&Pair], crop: usize, rng: &mut impl Rng) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut blurry = Vec::with_capacity(pairs.len());
    let mut sharp = Vec::with_capacity(pairs.len());
    for p in pairs {
        let s = p.blurry.shape();
        if s.h() < crop || s.w() < crop {
            return Err(Error::Dataset(format!(
                "{}: image {}x{} is smaller than the {crop}x{crop} crop",
                p.name,
                s.h(),
                s.w()
            )));
        }
        let top = rng.gen_range(0..=s.h() - crop);
        let left = rng.gen_range(0..=s.w() - crop);
        blurry.push(normalize(&crop_window(&p.blurry, top, left, crop)));
        sharp.push(normalize(&crop_window(&p.sharp, top, left, crop)));
    }
    Ok((Tensor::stack_batch(&blurry)?, Tensor::stack_batch(&sharp)?))
}

/// Mean of the last [`SMOOTHING_WINDOW`] values (all of them if fewer).
pub fn smoothed_tail(losses: &[f64]) -> f64 {
    let tail = &losses[losses.len().saturating_sub(SMOOTHING_WINDOW)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.steps.first().map(|s| s.loss)
    }

    pub fn final_smoothed_loss(&self) -> Option<f64> {
        (!self.steps.is_empty()).then(|| smoothed_tail(&self.losses()))
    }
}

/// Model, optimizer state and position in the schedule.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    pub config: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: usize,
}

impl<T: Storable> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate(&model)?;
        let adam = AdamState::new(model.named_params().into_iter().map(|(_, t)| t.shape()));
        Ok(Trainer {
            model,
            adam,
            config,
            step: 0,
        })
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        (n / self.config.batch_size).max(1)
    }

    /// Total steps for a training set of `n` pairs.
    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.config.epochs * self.steps_per_epoch(n);
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    /// Dataset indices used by `step`.
    pub fn batch_indices(&self, n: usize, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch(n);
        let (epoch, pos) = (step / spe, step % spe);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed ^ PERMUTATION_STREAM, epoch as u64));
        perm.shuffle(&mut rng);
        let b = self.config.batch_size.min(n);
        perm[pos * b..pos * b + b].to_vec()
    }

    /// Loss and gradients (in parameter order) for one batch.
    pub fn loss_and_grads(&self, blurry: &Tensor<T>, sharp: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape)?;
        let x = tape.leaf(blurry.clone());
        let g = tape.leaf(sharp.clone());
        let fwd = bound.forward(&mut tape, &x)?;
        let loss = model::loss(&mut tape, &fwd, &g)?;
        let value = loss.value().item().to_f64_lossy();
        let mut grads = tape.backward(&loss)?;
        Ok((value, bound.vars().into_iter().map(|v| grads.take(v)).collect()))
    }

    /// Runs one optimizer step on `data`, returning its log entry.
    pub fn train_step(&mut self, data: &[Pair]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let step = self.step;
        let epoch = step / self.steps_per_epoch(data.len());
        let idx = self.batch_indices(data.len(), step);
        let pairs: Vec<&Pair> = idx.iter().map(|&i| &data[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed ^ CROP_STREAM, step as u64));
        let (blurry, sharp) = prepare_batch::<T>(&pairs, self.config.crop, &mut rng)?;
        let diverged = |reason: String| Error::Diverged { step, reason };
        let (loss, grads) = match self.loss_and_grads(&blurry, &sharp) {
            Ok(r) => r,
            Err(Error::NonFinite { op }) => return Err(diverged(format!("non-finite value in {op}"))),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(diverged(format!("loss is {loss}")));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(diverged("non-finite gradient".into()));
        }
        let lr = lr_at(epoch, &self.config);
        let mut params = self.model.params_mut();
        adam_step(&mut params, &grads, &mut self.adam, lr)?;
        self.step += 1;
        Ok(StepLog { step, epoch, lr, loss })
    }

    /// Trains until [`Trainer::total_steps`]. Checkpoints go to `ckpt` every
    /// `checkpoint_every` steps and at the end; on divergence the last good
    /// state is written there before the error is returned.
    pub fn fit(&mut self, data: &[Pair], ckpt: Option<&Path>, mut on_step: impl FnMut(&StepLog)) -> Result<TrainReport> {
        let start = Instant::now();
        let total = self.total_steps(data.len());
        let mut report = TrainReport::default();
        while self.step < total {
            match self.train_step(data) {
                Ok(log) => {
                    on_step(&log);
                    report.steps.push(log);
                }
                Err(e @ Error::Diverged { .. }) => {
                    if let Some(path) = ckpt {
                        self.checkpoint(data.len()).save(path)?;
                        log::error!("training diverged; last good state written to {}", path.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            if let (Some(every), Some(path)) = (self.config.checkpoint_every, ckpt) {
                if every > 0 && self.step % every == 0 && self.step < total {
                    self.checkpoint(data.len()).save(path)?;
                }
            }
        }
        if let Some(path) = ckpt {
            self.checkpoint(data.len()).save(path)?;
        }
        report.seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }

    /// Model, optimizer moments and schedule position; `n` is the training
    /// set size used to derive the epoch.
    pub fn checkpoint(&self, n: usize) -> Checkpoint {
        let meta = CheckpointMeta {
            model: self.model.spec().clone(),
            train: Some(self.config.clone()),
            epoch: self.step / self.steps_per_epoch(n.max(1)),
            step: self.step,
            rng_seed: self.config.seed,
            adam_step: self.adam.step,
        };
        let mut ckpt = Checkpoint::from_model(&self.model, meta);
        let names: Vec<String> = self.model.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, m) in names.iter().zip(&self.adam.m) {
            ckpt.tensors.push(StoredTensor::from_tensor(format!("adam.m.{name}"), m));
        }
        for (name, v) in names.iter().zip(&self.adam.v) {
            ckpt.tensors.push(StoredTensor::from_tensor(format!("adam.v.{name}"), v));
        }
        ckpt
    }

    /// Restores a trainer written by [`Trainer::checkpoint`]. `config`
    /// replaces the stored settings when given (e.g. to extend `max_steps`).
    pub fn from_checkpoint(ckpt: &Checkpoint, config: Option<TrainConfig>) -> Result<Self> {
        let model = ckpt.to_model::<T>()?;
        let config = config
            .or_else(|| ckpt.meta.train.clone())
            .ok_or_else(|| Error::Config("checkpoint carries no training settings".into()))?;
        let mut trainer = Trainer::new(model, config)?;
        let names: Vec<(String, Shape)> = trainer
            .model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        for (i, (name, shape)) in names.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut trainer.adam.m[i]), ("adam.v.", &mut trainer.adam.v[i])] {
                let key = format!("{prefix}{name}");
                let stored = ckpt
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("checkpoint has no optimizer state {key:?}")))?;
                *slot = stored.to_tensor(*shape)?;
            }
        }
        trainer.adam.step = ckpt.meta.adam_step;
        trainer.step = ckpt.meta.step;
        Ok(trainer)
    }
}

/// Default location of the CSV loss log next to a checkpoint.
pub fn loss_log_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("loss.csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_schedule() {
        let c = TrainConfig { epochs: 30, ..TrainConfig::paper() };
        assert_eq!(lr_at(0, &c), 1e-4);
        assert!((lr_at(10, &c) - 1e-5).abs() < 1e-18);
        assert!((lr_at(20, &c) - 1e-6).abs() < 1e-19);
        for e in 0..40 {
            assert!(lr_at(e + 1, &c) <= lr_at(e, &c));
        }
        let tiny = TrainConfig { epochs: 1, ..TrainConfig::paper() };
        assert_eq!(lr_at(0, &tiny), 1e-4);
    }

    #[test]
    fn smoothing_uses_tail() {
        let v: Vec<f64> = (0..30).map(f64::from).collect();
        assert_eq!(smoothed_tail(&v), (10..30).sum::<i32>() as f64 / 20.0);
        assert_eq!(smoothed_tail(&[2.0, 4.0]), 3.0);
    }
}
