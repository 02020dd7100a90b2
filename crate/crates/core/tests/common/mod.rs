//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use dmphn::{Scalar, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[-1, 1]`.
pub fn random<T: Scalar>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
}

/// Values with magnitude in `[0.1, 1]` and random sign, keeping ReLU inputs away from 0.
pub fn random_away_from_zero<T: Scalar>(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(0.1..1.0);
        T::from_f64_lossy(if rng.gen_bool(0.5) { m } else { -m })
    })
}

/// Six nested loops over (n, co, oy, ox, ci, ki, kj), zero padding.
pub fn conv2d_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape().0;
    let [cout, _, kh, kw] = w.shape().0;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(ni, ci, iy as usize, ix as usize) * w.at(co, ci, ki, kj);
                                }
                            }
                        }
                    }
                    out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(n, cout, oh, ow), out).unwrap()
}

/// Transposed convolution by direct scatter: every input pixel stamps the
/// kernel onto the output at `iy * stride - pad + ki`.
pub fn conv_transpose2d_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape().0;
    let [_, cout, kh, kw] = w.shape().0;
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (wd - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            for v in &mut out[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow] {
                *v = b[co];
            }
        }
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x.at(ni, ci, iy, ix);
                    for co in 0..cout {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oy = (iy * stride + ki) as isize - pad as isize;
                                let ox = (ix * stride + kj) as isize - pad as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    out[((ni * cout + co) * oh + oy as usize) * ow + ox as usize] +=
                                        xv * w.at(ci, co, ki, kj);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(Shape::new(n, cout, oh, ow), out).unwrap()
}

pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p.to_f64_lossy() - q.to_f64_lossy()).abs())
        .fold(0.0, f64::max)
}
