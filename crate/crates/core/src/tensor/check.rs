//! Numerical gradient oracle used to validate the tape.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `x`:
/// `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every element `i`.
pub fn finite_diff_grad<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if !(eps > T::zero()) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    let two_eps = eps + eps;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
            });
        }
        grad.push((plus - minus) / two_eps);
    }
    Tensor::from_vec(x.shape(), grad)
}

/// Norm-wise relative error `|a - b|_2 / max(|a|_2, |b|_2)`; zero when both vanish.
pub fn rel_err<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "rel_err on mismatched shapes");
    let norm = |t: &[T]| t.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p.to_f64_lossy() - q.to_f64_lossy()).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
