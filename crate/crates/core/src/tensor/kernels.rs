//! Convolution and resampling kernels on raw tensors.
//!
//! Convolutions lower to GEMM over an im2col buffer that is built one band
//! of output rows at a time, so memory stays bounded on 720p inputs. Every
//! output element is produced by a single GEMM call over the full reduction
//! axis and partial sums are combined in a fixed order, so results do not
//! depend on the rayon thread count.

use rayon::prelude::*;

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Upper bound on the im2col buffer of one band, in elements.
const BAND_ELEMS: usize = 1 << 21;
/// Preferred number of output columns per band.
const BAND_COLS: usize = 4096;

/// Geometry of a 2-D convolution mapping `cin x h x w` to `cout x oh x ow`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry of `conv2d(input, weight)` with `weight` laid out `[cout, cin, kh, kw]`.
    pub fn conv(
        op: &'static str,
        input: Shape,
        weight: Shape,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [cout, cin, kh, kw] = weight.0;
        if input.c() != cin {
            return Err(Error::ChannelMismatch {
                op,
                expected: cin,
                got: input.c(),
            });
        }
        if stride == 0 {
            return Err(Error::Geometry {
                op,
                reason: "stride must be at least 1".into(),
            });
        }
        if kh == 0 || kw == 0 {
            return Err(Error::Geometry {
                op,
                reason: "empty kernel".into(),
            });
        }
        let (ph, pw) = (input.h() + 2 * pad, input.w() + 2 * pad);
        if ph < kh || pw < kw {
            return Err(Error::Geometry {
                op,
                reason: format!(
                    "kernel {kh}x{kw} larger than padded input {ph}x{pw}, output would be empty"
                ),
            });
        }
        Ok(ConvGeom {
            cin,
            h: input.h(),
            w: input.w(),
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    /// Geometry of the convolution whose adjoint is `conv_transpose2d(input, weight)`,
    /// with `weight` laid out `[cin_t, cout_t, kh, kw]`.
    ///
    /// The returned geometry maps the transposed-conv *output* (`cout_t` channels)
    /// back onto its input (`cin_t` channels).
    pub fn transpose(
        op: &'static str,
        input: Shape,
        weight: Shape,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let [cin_t, cout_t, kh, kw] = weight.0;
        if input.c() != cin_t {
            return Err(Error::ChannelMismatch {
                op,
                expected: cin_t,
                got: input.c(),
            });
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Geometry {
                op,
                reason: format!("stride must be 1 or 2, got {stride}"),
            });
        }
        if input.h() == 0 || input.w() == 0 {
            return Err(Error::Geometry {
                op,
                reason: "empty input".into(),
            });
        }
        let out = |n: usize, k: usize| ((n - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
        let (oh, ow) = match (out(input.h(), kh), out(input.w(), kw)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::Geometry {
                    op,
                    reason: format!(
                        "output of {}x{} input with k{kh}x{kw} s{stride} p{pad} would be empty",
                        input.h(),
                        input.w()
                    ),
                })
            }
        };
        let g = ConvGeom::conv(op, Shape::new(input.n(), cout_t, oh, ow), weight, stride, pad)?;
        debug_assert_eq!((g.oh, g.ow), (input.h(), input.w()));
        Ok(g)
    }

    /// Reduction length of the lowered GEMM.
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }

    pub fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    pub fn input_shape(&self, n: usize) -> Shape {
        Shape::new(n, self.cin, self.h, self.w)
    }

    pub fn output_shape(&self, n: usize) -> Shape {
        Shape::new(n, self.cout, self.oh, self.ow)
    }

    fn band_rows(&self) -> usize {
        let cols = BAND_COLS.min(BAND_ELEMS / self.k().max(1)).max(self.ow);
        (cols / self.ow).clamp(1, self.oh)
    }

    fn bands(&self) -> Vec<(usize, usize)> {
        let rows = self.band_rows();
        (0..self.oh)
            .step_by(rows)
            .map(|r0| (r0, (r0 + rows).min(self.oh)))
            .collect()
    }

    /// Multiply-accumulate count for one image.
    pub fn macs(&self) -> u64 {
        (self.cout * self.k() * self.out_plane()) as u64
    }
}

/// Bounds-checked strided GEMM, `c = a * b + beta * c`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B out of bounds");
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: C out of bounds");
    // SAFETY: the assertions above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Writes the im2col band for output rows `[r0, r1)` of one image into `cols`,
/// laid out `[k, (r1 - r0) * ow]`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, r0: usize, r1: usize, cols: &mut [T]) {
    let p = (r1 - r0) * g.ow;
    for ci in 0..g.cin {
        let plane = &x[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for (t, oy) in (r0..r1).enumerate() {
                    let d = &mut dst[t * g.ow..(t + 1) * g.ow];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix >= 0 && ix < g.w as isize {
                            src[ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds an im2col band back onto one image, the adjoint of [`im2col`].
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, r0: usize, r1: usize, x: &mut [T]) {
    let p = (r1 - r0) * g.ow;
    for ci in 0..g.cin {
        let plane = &mut x[ci * g.in_plane()..(ci + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for (t, oy) in (r0..r1).enumerate() {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[t * g.ow..(t + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y = conv(x, w) + b` with zero padding.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let n = x.shape().n();
    let bands = g.bands();
    let tasks: Vec<(usize, usize, usize)> = (0..n)
        .flat_map(|i| bands.iter().map(move |&(r0, r1)| (i, r0, r1)))
        .collect();
    let k = g.k();
    let in_img = g.cin * g.in_plane();
    let xd = x.data();
    let wd = w.data();

    let pieces: Vec<Vec<T>> = tasks
        .par_iter()
        .map(|&(i, r0, r1)| {
            let p = (r1 - r0) * g.ow;
            let mut cols = vec![T::zero(); k * p];
            im2col(&xd[i * in_img..(i + 1) * in_img], g, r0, r1, &mut cols);
            let mut out = vec![T::zero(); g.cout * p];
            gemm(g.cout, k, p, wd, (k, 1), &cols, (p, 1), T::zero(), &mut out, (p, 1));
            out
        })
        .collect();

    let out_plane = g.out_plane();
    let mut y = vec![T::zero(); n * g.cout * out_plane];
    for (&(i, r0, r1), piece) in tasks.iter().zip(&pieces) {
        let p = (r1 - r0) * g.ow;
        for co in 0..g.cout {
            let off = (i * g.cout + co) * out_plane + r0 * g.ow;
            y[off..off + p].copy_from_slice(&piece[co * p..(co + 1) * p]);
        }
    }
    if let Some(b) = bias {
        let bd = b.data();
        for plane in y.chunks_mut(out_plane).enumerate() {
            let (idx, plane) = plane;
            let bv = bd[idx % g.cout];
            plane.iter_mut().for_each(|v| *v = *v + bv);
        }
    }
    Tensor::from_vec(g.output_shape(n), y).expect("conv output length")
}

/// Gradient of `conv(x, w)` with respect to `x`, given the output gradient `dy`.
///
/// Also serves as the forward pass of the transposed convolution.
pub fn conv2d_input_grad<T: Scalar>(dy: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let n = dy.shape().n();
    let bands = g.bands();
    let k = g.k();
    let in_img = g.cin * g.in_plane();
    let out_plane = g.out_plane();
    let dyd = dy.data();
    let wd = w.data();
    let wave = rayon::current_num_threads().max(1);

    let mut dx = vec![T::zero(); n * in_img];
    for (i, dx_img) in dx.chunks_mut(in_img).enumerate() {
        let dy_img = &dyd[i * g.cout * out_plane..(i + 1) * g.cout * out_plane];
        for chunk in bands.chunks(wave) {
            let cols: Vec<Vec<T>> = chunk
                .par_iter()
                .map(|&(r0, r1)| {
                    let p = (r1 - r0) * g.ow;
                    let mut cols = vec![T::zero(); k * p];
                    gemm(
                        k,
                        g.cout,
                        p,
                        wd,
                        (1, k),
                        &dy_img[r0 * g.ow..],
                        (out_plane, 1),
                        T::zero(),
                        &mut cols,
                        (p, 1),
                    );
                    cols
                })
                .collect();
            for (&(r0, r1), c) in chunk.iter().zip(&cols) {
                col2im(c, g, r0, r1, dx_img);
            }
        }
    }
    Tensor::from_vec(g.input_shape(n), dx).expect("conv input-grad length")
}

/// Gradient of `conv(x, w)` with respect to `w`, laid out like `w`.
pub fn conv2d_weight_grad<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let n = x.shape().n();
    let bands = g.bands();
    let k = g.k();
    let in_img = g.cin * g.in_plane();
    let out_plane = g.out_plane();
    let xd = x.data();
    let dyd = dy.data();

    let partials: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x_img = &xd[i * in_img..(i + 1) * in_img];
            let dy_img = &dyd[i * g.cout * out_plane..(i + 1) * g.cout * out_plane];
            let mut acc = vec![T::zero(); g.cout * k];
            for &(r0, r1) in &bands {
                let p = (r1 - r0) * g.ow;
                let mut cols = vec![T::zero(); k * p];
                im2col(x_img, g, r0, r1, &mut cols);
                gemm(
                    g.cout,
                    p,
                    k,
                    &dy_img[r0 * g.ow..],
                    (out_plane, 1),
                    &cols,
                    (1, p),
                    T::one(),
                    &mut acc,
                    (k, 1),
                );
            }
            acc
        })
        .collect();

    let mut dw = vec![T::zero(); g.cout * k];
    for part in &partials {
        dw.iter_mut().zip(part).for_each(|(a, &b)| *a = *a + b);
    }
    Tensor::from_vec(Shape::new(g.cout, g.cin, g.kh, g.kw), dw).expect("weight-grad length")
}

/// Per-channel sum of `dy` over batch and space, shaped `1 x C x 1 x 1`.
pub fn channel_sum<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let mut out = vec![T::zero(); s.c()];
    for (idx, plane) in dy.data().chunks(s.plane()).enumerate() {
        let c = idx % s.c();
        out[c] = out[c] + plane.iter().copied().sum::<T>();
    }
    Tensor::from_vec(Shape::new(1, s.c(), 1, 1), out).expect("channel-sum length")
}

/// Linear interpolation taps for one output coordinate: `(i0, i1, t)` with
/// value `(1 - t) * in[i0] + t * in[i1]`.
pub type Taps = (usize, usize, f64);

/// Half-pixel-centred bilinear taps (`align_corners = false`), source
/// coordinates clamped at the borders.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let t = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, t)
        })
        .collect()
}

/// Separable resampling of every plane with the given row and column taps.
pub fn resample<T: Scalar>(x: &Tensor<T>, rows: &[Taps], cols: &[Taps]) -> Tensor<T> {
    let s = x.shape();
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = Vec::with_capacity(s.n() * s.c() * oh * ow);
    let mut tmp = vec![T::zero(); s.h() * ow];
    for plane in x.data().chunks(s.plane()) {
        for (y, row) in plane.chunks(s.w()).enumerate() {
            for (xo, &(i0, i1, t)) in cols.iter().enumerate() {
                let t = T::from_f64_lossy(t);
                tmp[y * ow + xo] = (T::one() - t) * row[i0] + t * row[i1];
            }
        }
        for &(i0, i1, t) in rows {
            let t = T::from_f64_lossy(t);
            let (a, b) = (&tmp[i0 * ow..(i0 + 1) * ow], &tmp[i1 * ow..(i1 + 1) * ow]);
            out.extend(a.iter().zip(b).map(|(&a, &b)| (T::one() - t) * a + t * b));
        }
    }
    Tensor::from_vec(s.with_hw(oh, ow), out).expect("resample length")
}

/// Adjoint of [`resample`]: maps a gradient on the output grid back onto
/// an input of shape `input`.
pub fn resample_adjoint<T: Scalar>(
    dy: &Tensor<T>,
    input: Shape,
    rows: &[Taps],
    cols: &[Taps],
) -> Tensor<T> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![T::zero(); input.numel()];
    let mut tmp = vec![T::zero(); input.h() * ow];
    for (plane_out, plane_in) in dy.data().chunks(oh * ow).zip(out.chunks_mut(input.plane())) {
        tmp.fill(T::zero());
        for (yo, &(i0, i1, t)) in rows.iter().enumerate() {
            let t = T::from_f64_lossy(t);
            for xo in 0..ow {
                let g = plane_out[yo * ow + xo];
                tmp[i0 * ow + xo] = tmp[i0 * ow + xo] + (T::one() - t) * g;
                tmp[i1 * ow + xo] = tmp[i1 * ow + xo] + t * g;
            }
        }
        for y in 0..input.h() {
            let row = &mut plane_in[y * input.w()..(y + 1) * input.w()];
            for (xo, &(i0, i1, t)) in cols.iter().enumerate() {
                let t = T::from_f64_lossy(t);
                let g = tmp[y * ow + xo];
                row[i0] = row[i0] + (T::one() - t) * g;
                row[i1] = row[i1] + t * g;
            }
        }
    }
    Tensor::from_vec(input, out).expect("resample adjoint length")
}
