//! Wall-clock timing of whole-model inference.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub label: String,
    pub height: usize,
    pub width: usize,
    /// Analytic FLOPs of one forward pass.
    pub flops: u64,
    /// Seconds per timed iteration, in run order.
    pub seconds: Vec<f64>,
}

impl BenchReport {
    pub fn mean(&self) -> f64 {
        self.seconds.iter().sum::<f64>() / self.seconds.len().max(1) as f64
    }

    /// Nearest-rank percentile, `q` in `[0, 100]`.
    pub fn percentile(&self, q: f64) -> f64 {
        let mut s = self.seconds.clone();
        if s.is_empty() {
            return f64::NAN;
        }
        s.sort_by(f64::total_cmp);
        let rank = ((q / 100.0) * s.len() as f64).ceil() as usize;
        s[rank.clamp(1, s.len()) - 1]
    }

    pub fn p50(&self) -> f64 {
        self.percentile(50.0)
    }

    pub fn p95(&self) -> f64 {
        self.percentile(95.0)
    }

    pub fn flops_per_second(&self) -> f64 {
        self.flops as f64 / self.mean()
    }

    pub const CSV_HEADER: &'static str = "model,height,width,iters,mean_ms,p50_ms,p95_ms,gflops,gflop_per_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3}",
            self.label,
            self.height,
            self.width,
            self.seconds.len(),
            self.mean() * 1e3,
            self.p50() * 1e3,
            self.p95() * 1e3,
            self.flops as f64 / 1e9,
            self.flops_per_second() / 1e9
        )
    }
}

/// Times `iters` forward passes of `model` on one random `h x w` image after
/// `warmup` untimed passes.
pub fn bench_model<T: Scalar>(model: &Model<T>, h: usize, w: usize, iters: usize, warmup: usize) -> Result<BenchReport> {
    if iters == 0 {
        return Err(Error::Config("bench needs at least one iteration".into()));
    }
    let shape = Shape::new(1, model.spec().codec.in_channels, h, w);
    model.check_input(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-0.5..0.5)));
    for _ in 0..warmup {
        model.forward(&x)?;
    }
    let mut seconds = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        let (y, _) = model.forward(&x)?;
        seconds.push(t0.elapsed().as_secs_f64());
        drop(y);
    }
    Ok(BenchReport {
        label: model.spec().label(),
        height: h,
        width: w,
        flops: model.flops(1, h, w)?,
        seconds,
    })
}
