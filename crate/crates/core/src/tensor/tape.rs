//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable op is a method on [`Tape`]. Ops are appended in
//! execution order, which is a topological order of the graph, so the
//! backward pass simply walks the records in reverse. A tape created with
//! [`Tape::inference`] records nothing and intermediate values are dropped
//! as soon as the caller releases them.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom, Taps};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// A tensor value registered on a tape.
#[derive(Clone, Debug)]
pub struct Var<T> {
    tape: u64,
    id: usize,
    value: Tensor<T>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

/// Resampling factor for [`Tape::resize_bilinear`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resize {
    /// Halve both spatial dimensions.
    Down,
    /// Double both spatial dimensions.
    Up,
}

enum Op<T> {
    Conv2d {
        x: Tensor<T>,
        w: Tensor<T>,
        bias: Shape,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Tensor<T>,
        w: Tensor<T>,
        bias: Shape,
        geom: ConvGeom,
    },
    Relu {
        out: Tensor<T>,
    },
    Add,
    Scale {
        factor: T,
    },
    ConcatGrid {
        rows: usize,
        cols: usize,
    },
    SplitGrid {
        rows: usize,
        cols: usize,
        patch: Shape,
    },
    MseHalf {
        diff: Tensor<T>,
    },
    Resize {
        input: Shape,
        rows: Vec<Taps>,
        cols: Vec<Taps>,
    },
}

struct Record<T> {
    op: Op<T>,
    inputs: Vec<usize>,
    outputs: Vec<usize>,
}

/// Ordered log of op applications for one forward pass.
///
/// A tape is single-owner; run one tape per concurrent forward pass.
pub struct Tape<T> {
    id: u64,
    next_var: usize,
    records: Vec<Record<T>>,
    recording: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A tape that evaluates ops without recording them.
    pub fn inference() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            next_var: 0,
            records: Vec::new(),
            recording,
            consumed: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded op applications.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var<T> {
        self.var(value)
    }

    fn var(&mut self, value: Tensor<T>) -> Var<T> {
        let id = self.next_var;
        self.next_var += 1;
        Var {
            tape: self.id,
            id,
            value,
        }
    }

    fn check_owned(&self, vars: &[&Var<T>]) -> Result<()> {
        if vars.iter().any(|v| v.tape != self.id) {
            return Err(Error::Backward("variable belongs to a different tape".into()));
        }
        Ok(())
    }

    fn push(&mut self, op: Op<T>, inputs: &[&Var<T>], outputs: &[&Var<T>]) {
        if self.recording {
            self.records.push(Record {
                op,
                inputs: inputs.iter().map(|v| v.id).collect(),
                outputs: outputs.iter().map(|v| v.id).collect(),
            });
        }
    }

    fn finite(op: &'static str, t: &Tensor<T>) -> Result<()> {
        if cfg!(debug_assertions) && !t.is_finite() {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    /// Zero-padded cross-correlation; `w` is `[cout, cin, kh, kw]`, `b` has `cout` elements.
    pub fn conv2d(
        &mut self,
        x: &Var<T>,
        w: &Var<T>,
        b: &Var<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<T>> {
        self.check_owned(&[x, w, b])?;
        let geom = ConvGeom::conv("conv2d", x.shape(), w.shape(), stride, pad)?;
        check_bias("conv2d", b, geom.cout)?;
        let y = kernels::conv2d_forward(x.value(), w.value(), Some(b.value()), &geom);
        Self::finite("conv2d", &y)?;
        let out = self.var(y);
        self.push(
            Op::Conv2d {
                x: x.value.clone(),
                w: w.value.clone(),
                bias: b.shape(),
                geom,
            },
            &[x, w, b],
            &[&out],
        );
        Ok(out)
    }

    /// Transposed convolution, the adjoint of [`Tape::conv2d`] with the same
    /// weight tensor, plus bias. `w` is `[cin, cout, kh, kw]`; the output
    /// spatial size is `(H - 1) * stride - 2 * pad + kh`.
    pub fn conv_transpose2d(
        &mut self,
        x: &Var<T>,
        w: &Var<T>,
        b: &Var<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<T>> {
        self.check_owned(&[x, w, b])?;
        let geom = ConvGeom::transpose("conv_transpose2d", x.shape(), w.shape(), stride, pad)?;
        check_bias("conv_transpose2d", b, geom.cin)?;
        let mut y = kernels::conv2d_input_grad(x.value(), w.value(), &geom);
        add_bias(&mut y, b.value());
        Self::finite("conv_transpose2d", &y)?;
        let out = self.var(y);
        self.push(
            Op::ConvTranspose2d {
                x: x.value.clone(),
                w: w.value.clone(),
                bias: b.shape(),
                geom,
            },
            &[x, w, b],
            &[&out],
        );
        Ok(out)
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: &Var<T>) -> Result<Var<T>> {
        self.check_owned(&[x])?;
        let y = x.value.map(|v| if v > T::zero() { v } else { T::zero() });
        let out = self.var(y);
        self.push(
            Op::Relu {
                out: out.value.clone(),
            },
            &[x],
            &[&out],
        );
        Ok(out)
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.check_owned(&[a, b])?;
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let y = a.value.zip_map(&b.value, |p, q| p + q)?;
        Self::finite("add", &y)?;
        let out = self.var(y);
        self.push(Op::Add, &[a, b], &[&out]);
        Ok(out)
    }

    /// Elementwise `factor * x` for a constant `factor`.
    pub fn scale(&mut self, x: &Var<T>, factor: T) -> Result<Var<T>> {
        self.check_owned(&[x])?;
        let y = x.value.map(|v| v * factor);
        Self::finite("scale", &y)?;
        let out = self.var(y);
        self.push(Op::Scale { factor }, &[x], &[&out]);
        Ok(out)
    }

    /// Tiles `rows * cols` equally shaped patches (row-major) into one tensor.
    pub fn concat_grid(&mut self, patches: &[Var<T>], rows: usize, cols: usize) -> Result<Var<T>> {
        if rows == 0 || cols == 0 || patches.len() != rows * cols {
            return Err(Error::Geometry {
                op: "concat_grid",
                reason: format!("{} patches for a {rows}x{cols} grid", patches.len()),
            });
        }
        let refs: Vec<&Var<T>> = patches.iter().collect();
        self.check_owned(&refs)?;
        let patch = patches[0].shape();
        if let Some(bad) = patches.iter().find(|p| p.shape() != patch) {
            return Err(Error::ShapeMismatch {
                op: "concat_grid",
                lhs: patch,
                rhs: bad.shape(),
            });
        }
        let values: Vec<&Tensor<T>> = patches.iter().map(|p| &p.value).collect();
        let y = concat_values(&values, rows, cols);
        let out = self.var(y);
        self.push(Op::ConcatGrid { rows, cols }, &refs, &[&out]);
        Ok(out)
    }

    /// Splits into `rows * cols` non-overlapping patches in row-major order.
    pub fn split_grid(&mut self, x: &Var<T>, rows: usize, cols: usize) -> Result<Vec<Var<T>>> {
        self.check_owned(&[x])?;
        let s = x.shape();
        if rows == 0 || cols == 0 || s.h() % rows != 0 || s.w() % cols != 0 {
            return Err(Error::Geometry {
                op: "split_grid",
                reason: format!("{}x{} is not divisible by a {rows}x{cols} grid", s.h(), s.w()),
            });
        }
        let patch = s.with_hw(s.h() / rows, s.w() / cols);
        let outs: Vec<Var<T>> = split_values(&x.value, rows, cols)
            .into_iter()
            .map(|t| self.var(t))
            .collect();
        let out_refs: Vec<&Var<T>> = outs.iter().collect();
        self.push(Op::SplitGrid { rows, cols, patch }, &[x], &out_refs);
        Ok(outs)
    }

    /// `0.5 * mean((pred - target)^2)` as a one-element tensor.
    pub fn mse_half(&mut self, pred: &Var<T>, target: &Var<T>) -> Result<Var<T>> {
        self.check_owned(&[pred, target])?;
        if pred.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse_half",
                lhs: pred.shape(),
                rhs: target.shape(),
            });
        }
        let diff = pred.value.zip_map(&target.value, |p, q| p - q)?;
        let sq: f64 = diff.data().iter().map(|d| d.to_f64_lossy().powi(2)).sum();
        let loss = Tensor::scalar(T::from_f64_lossy(0.5 * sq / diff.numel() as f64));
        Self::finite("mse_half", &loss)?;
        let out = self.var(loss);
        self.push(Op::MseHalf { diff }, &[pred, target], &[&out]);
        Ok(out)
    }

    /// Bilinear resampling by a factor of two (half-pixel centres, clamped borders).
    pub fn resize_bilinear(&mut self, x: &Var<T>, factor: Resize) -> Result<Var<T>> {
        self.check_owned(&[x])?;
        let s = x.shape();
        let (oh, ow) = match factor {
            Resize::Down => {
                if s.h() % 2 != 0 || s.w() % 2 != 0 || s.h() == 0 || s.w() == 0 {
                    return Err(Error::Geometry {
                        op: "resize_bilinear",
                        reason: format!("{}x{} is not divisible by 2", s.h(), s.w()),
                    });
                }
                (s.h() / 2, s.w() / 2)
            }
            Resize::Up => {
                if s.h() == 0 || s.w() == 0 {
                    return Err(Error::Geometry {
                        op: "resize_bilinear",
                        reason: "empty input".into(),
                    });
                }
                (s.h() * 2, s.w() * 2)
            }
        };
        let rows = kernels::bilinear_taps(s.h(), oh);
        let cols = kernels::bilinear_taps(s.w(), ow);
        let y = kernels::resample(&x.value, &rows, &cols);
        let out = self.var(y);
        self.push(
            Op::Resize {
                input: s,
                rows,
                cols,
            },
            &[x],
            &[&out],
        );
        Ok(out)
    }

    /// Propagates gradients from a one-element `loss` back through the tape.
    ///
    /// The tape is consumed: a second call fails.
    pub fn backward(&mut self, loss: &Var<T>) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::Backward("tape was created without recording".into()));
        }
        if self.consumed {
            return Err(Error::Backward("tape already consumed by a previous backward".into()));
        }
        self.check_owned(&[loss])?;
        if loss.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must have one element, got shape {}",
                loss.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.next_var];
        grads[loss.id] = Some(Tensor::full(loss.shape(), T::one()));

        for rec in std::mem::take(&mut self.records).into_iter().rev() {
            if rec.outputs.iter().all(|&o| grads[o].is_none()) {
                continue;
            }
            let input_grads = backprop(&rec, &mut grads)?;
            for (&id, g) in rec.inputs.iter().zip(input_grads) {
                if let Some(g) = g {
                    accumulate(&mut grads[id], g);
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; zero when `var` did not
    /// contribute to the loss.
    pub fn get(&self, var: &Var<T>) -> Tensor<T> {
        assert_eq!(var.tape, self.tape, "variable belongs to a different tape");
        self.grads
            .get(var.id)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    /// Removes and returns the gradient for `var`, avoiding a copy.
    pub fn take(&mut self, var: &Var<T>) -> Tensor<T> {
        assert_eq!(var.tape, self.tape, "variable belongs to a different tape");
        self.grads
            .get_mut(var.id)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

fn check_bias<T: Scalar>(op: &'static str, b: &Var<T>, channels: usize) -> Result<()> {
    if b.value.numel() != channels {
        return Err(Error::ChannelMismatch {
            op,
            expected: channels,
            got: b.value.numel(),
        });
    }
    Ok(())
}

fn add_bias<T: Scalar>(y: &mut Tensor<T>, b: &Tensor<T>) {
    let s = y.shape();
    let bd = b.data().to_vec();
    for (idx, plane) in y.data_mut().chunks_mut(s.plane()).enumerate() {
        let bv = bd[idx % s.c()];
        plane.iter_mut().for_each(|v| *v = *v + bv);
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a = *a + b),
    }
}

fn reshape_bias<T: Scalar>(g: Tensor<T>, like: Shape) -> Tensor<T> {
    g.reshape(like).expect("bias gradient has one entry per channel")
}

/// Gradients for the inputs of one record, in input order.
fn backprop<T: Scalar>(
    rec: &Record<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<Vec<Option<Tensor<T>>>> {
    let single = |grads: &mut [Option<Tensor<T>>]| -> Tensor<T> {
        grads[rec.outputs[0]].clone().expect("checked by caller")
    };
    Ok(match &rec.op {
        Op::Conv2d { x, w, bias, geom } => {
            let dy = single(grads);
            let dx = kernels::conv2d_input_grad(&dy, w, geom);
            let dw = kernels::conv2d_weight_grad(x, &dy, geom);
            let db = reshape_bias(kernels::channel_sum(&dy), *bias);
            vec![Some(dx), Some(dw), Some(db)]
        }
        Op::ConvTranspose2d { x, w, bias, geom } => {
            // y = A^T x with A = conv(., w); so dx = A g and dw follows from <x, conv(g, w)>.
            let dy = single(grads);
            let dx = kernels::conv2d_forward(&dy, w, None, geom);
            let dw = kernels::conv2d_weight_grad(&dy, x, geom);
            let db = reshape_bias(kernels::channel_sum(&dy), *bias);
            vec![Some(dx), Some(dw), Some(db)]
        }
        Op::Relu { out } => {
            let dy = single(grads);
            let dx = dy.zip_map(out, |g, y| if y > T::zero() { g } else { T::zero() })?;
            vec![Some(dx)]
        }
        Op::Add => {
            let dy = single(grads);
            vec![Some(dy.clone()), Some(dy)]
        }
        Op::Scale { factor } => {
            let f = *factor;
            vec![Some(single(grads).map(|g| g * f))]
        }
        Op::ConcatGrid { rows, cols, .. } => {
            let dy = single(grads);
            split_values(&dy, *rows, *cols).into_iter().map(Some).collect()
        }
        Op::SplitGrid { rows, cols, patch } => {
            let parts: Vec<Tensor<T>> = rec
                .outputs
                .iter()
                .map(|&o| grads[o].clone().unwrap_or_else(|| Tensor::zeros(*patch)))
                .collect();
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            vec![Some(concat_values(&refs, *rows, *cols))]
        }
        Op::MseHalf { diff } => {
            let g = single(grads).item();
            let scale = g / T::from_usize(diff.numel()).expect("element count");
            let dp = diff.map(|d| d * scale);
            let dt = dp.map(|d| -d);
            vec![Some(dp), Some(dt)]
        }
        Op::Resize { input, rows, cols } => {
            let dy = single(grads);
            vec![Some(kernels::resample_adjoint(&dy, *input, rows, cols))]
        }
    })
}

fn concat_values<T: Scalar>(patches: &[&Tensor<T>], rows: usize, cols: usize) -> Tensor<T> {
    let p = patches[0].shape();
    let (ph, pw) = (p.h(), p.w());
    let out_shape = p.with_hw(rows * ph, cols * pw);
    let (oh, ow) = (out_shape.h(), out_shape.w());
    let mut out = vec![T::zero(); out_shape.numel()];
    for (idx, patch) in patches.iter().enumerate() {
        let (r, c) = (idx / cols, idx % cols);
        for (pi, src_plane) in patch.data().chunks(ph * pw).enumerate() {
            let dst_plane = &mut out[pi * oh * ow..(pi + 1) * oh * ow];
            for y in 0..ph {
                let dst = (r * ph + y) * ow + c * pw;
                dst_plane[dst..dst + pw].copy_from_slice(&src_plane[y * pw..(y + 1) * pw]);
            }
        }
    }
    Tensor::from_vec(out_shape, out).expect("concat length")
}

fn split_values<T: Scalar>(x: &Tensor<T>, rows: usize, cols: usize) -> Vec<Tensor<T>> {
    let s = x.shape();
    let (ph, pw) = (s.h() / rows, s.w() / cols);
    let patch = s.with_hw(ph, pw);
    let mut outs = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut data = Vec::with_capacity(patch.numel());
            for plane in x.data().chunks(s.plane()) {
                for y in 0..ph {
                    let src = (r * ph + y) * s.w() + c * pw;
                    data.extend_from_slice(&plane[src..src + pw]);
                }
            }
            outs.push(Tensor::from_vec(patch, data).expect("split length"));
        }
    }
    outs
}
