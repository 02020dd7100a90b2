//! End-to-end gradient checks of whole models against central differences.

mod common;

use common::{random, rng};
use dmphn::blocks::CodecConfig;
use dmphn::model::{self, Model, ModelSpec};
use dmphn::tensor::check::rel_err;
use dmphn::{Shape, Tape, Tensor};

fn tiny_codec() -> CodecConfig {
    CodecConfig {
        stage_channels: [3, 4, 5],
        ..CodecConfig::default()
    }
}

fn loss_of(model: &Model<f64>, x: &Tensor<f64>, g: &Tensor<f64>) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let xv = tape.leaf(x.clone());
    let gv = tape.leaf(g.clone());
    let fwd = bound.forward(&mut tape, &xv).unwrap();
    model::loss(&mut tape, &fwd, &gv).unwrap().value().item()
}

fn analytic(model: &Model<f64>, x: &Tensor<f64>, g: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape).unwrap();
    let xv = tape.leaf(x.clone());
    let gv = tape.leaf(g.clone());
    let fwd = bound.forward(&mut tape, &xv).unwrap();
    let loss = model::loss(&mut tape, &fwd, &gv).unwrap();
    let mut grads = tape.backward(&loss).unwrap();
    bound
        .vars()
        .into_iter()
        .flat_map(|v| grads.take(v).data().to_vec())
        .collect()
}

fn numeric(model: &Model<f64>, x: &Tensor<f64>, g: &Tensor<f64>, eps: f64) -> Vec<f64> {
    let mut probe = model.clone();
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.numel()).collect();
    let mut out = Vec::new();
    for (k, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let orig = probe.params_mut()[k].data()[i];
            probe.params_mut()[k].data_mut()[i] = orig + eps;
            let plus = loss_of(&probe, x, g);
            probe.params_mut()[k].data_mut()[i] = orig - eps;
            let minus = loss_of(&probe, x, g);
            probe.params_mut()[k].data_mut()[i] = orig;
            out.push((plus - minus) / (2.0 * eps));
        }
    }
    out
}

fn flat(v: Vec<f64>) -> Tensor<f64> {
    let n = v.len();
    Tensor::from_vec(Shape::new(1, 1, 1, n), v).unwrap()
}

fn check(spec: ModelSpec, shape: Shape, tol: f64) {
    let mut r = rng(17);
    let model = Model::<f64>::init(&spec, 3).unwrap();
    let x = random::<f64>(shape, &mut r);
    let g = random::<f64>(shape, &mut r);
    let a = flat(analytic(&model, &x, &g));
    let n = flat(numeric(&model, &x, &g, 1e-6));
    let e = rel_err(&a, &n);
    assert!(e < tol, "{}: relative gradient error {e}", spec.label());
}

#[test]
fn dmphn_1_2_full_gradient_matches_finite_differences() {
    check(
        ModelSpec::dmphn("1-2").with_codec(tiny_codec()),
        Shape::new(1, 3, 16, 16),
        1e-4,
    );
}

#[test]
fn stacked_and_baseline_gradients_match_finite_differences() {
    check(
        ModelSpec::vmphn("1-2").with_codec(tiny_codec()),
        Shape::new(1, 3, 16, 16),
        1e-4,
    );
    check(
        ModelSpec::dmsn(2).with_codec(tiny_codec()),
        Shape::new(1, 3, 16, 16),
        1e-4,
    );
}
