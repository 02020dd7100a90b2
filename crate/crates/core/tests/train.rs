mod common;

use common::rng;
use dmphn::blocks::CodecConfig;
use dmphn::checkpoint::Checkpoint;
use dmphn::data::Pair;
use dmphn::model::{Model, ModelSpec};
use dmphn::train::{adam_step, lr_at, normalize, prepare_batch, AdamState, TrainConfig, Trainer};
use dmphn::{DType, Error, Shape, Tensor};
use rand::Rng;

fn tiny_spec() -> ModelSpec {
    ModelSpec::dmphn("1-2").with_codec(CodecConfig {
        stage_channels: [4, 6, 8],
        ..CodecConfig::default()
    })
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        crop: 16,
        epochs: 3,
        seed: 5,
        ..TrainConfig::desk()
    }
}

fn pairs(n: usize, seed: u64) -> Vec<Pair> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let sharp = Tensor::from_fn(Shape::new(1, 3, 20, 24), |_| r.gen_range(0.0..1.0f32));
            let blurry = sharp.map(|v| 0.8 * v + 0.1);
            Pair {
                name: format!("{i:06}.png"),
                blurry,
                sharp,
            }
        })
        .collect()
}

fn params(m: &Model<f32>) -> Vec<Tensor<f32>> {
    m.named_params().into_iter().map(|(_, t)| t.clone()).collect()
}

#[test]
fn first_adam_step_by_hand() {
    let mut p = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 0.5);
    let g = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 1.0);
    let mut st = AdamState::<f64>::new([p.shape()]);
    adam_step(&mut [&mut p], &[g.clone()], &mut st, 1e-4).unwrap();
    // m = 0.1, v = 0.001; bias-corrected both give 1, so the step is lr / (1 + eps)
    let expected = 0.5 - 1e-4 * 1.0 / (1.0 + 1e-8);
    assert!((p.item() - expected).abs() < 1e-15);
    assert!((st.m[0].item() - 0.1).abs() < 1e-15);
    assert!((st.v[0].item() - 0.001).abs() < 1e-15);
    adam_step(&mut [&mut p], &[g], &mut st, 1e-4).unwrap();
    let m2 = 0.9 * 0.1 + 0.1;
    let v2 = 0.999 * 0.001 + 0.001;
    let step2 = 1e-4 * (m2 / (1.0 - 0.81)) / ((v2 / (1.0 - 0.999f64.powi(2))).sqrt() + 1e-8);
    assert!((p.item() - (expected - step2)).abs() < 1e-15);
}

#[test]
fn zero_gradient_keeps_parameters_and_decays_moments() {
    let mut p = Tensor::<f64>::full(Shape::new(1, 2, 1, 1), 0.25);
    let mut st = AdamState::<f64>::new([p.shape()]);
    let zero = Tensor::zeros(p.shape());
    adam_step(&mut [&mut p], &[zero.clone()], &mut st, 1e-3).unwrap();
    assert_eq!(p.data(), &[0.25, 0.25]);
    let mut q = Tensor::<f64>::full(Shape::new(1, 1, 1, 1), 1.0);
    let mut s2 = AdamState::<f64>::new([q.shape()]);
    s2.m[0] = Tensor::full(q.shape(), 0.5);
    s2.v[0] = Tensor::full(q.shape(), 0.5);
    let zero = Tensor::zeros(q.shape());
    adam_step(&mut [&mut q], &[zero], &mut s2, 0.0).unwrap();
    assert_eq!(q.item(), 1.0);
    assert!((s2.m[0].item() - 0.45).abs() < 1e-15);
    assert!((s2.v[0].item() - 0.4995).abs() < 1e-15);
}

#[test]
fn adam_rejects_bad_gradients() {
    let mut p = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 2));
    let mut st = AdamState::<f64>::new([p.shape()]);
    let nan = Tensor::from_vec(p.shape(), vec![f64::NAN, 0.0]).unwrap();
    assert!(matches!(adam_step(&mut [&mut p], &[nan], &mut st, 1e-3), Err(Error::NonFinite { .. })));
    let wrong = Tensor::zeros(Shape::new(1, 1, 1, 3));
    assert!(adam_step(&mut [&mut p], &[wrong], &mut st, 1e-3).is_err());
    assert_eq!(st.step, 0);
}

#[test]
fn schedule_examples() {
    let c = TrainConfig::paper();
    assert_eq!(lr_at(0, &c), 1e-4);
    assert!((lr_at(1000, &c) - 1e-5).abs() < 1e-18);
    assert!((lr_at(999, &c) - 1e-4).abs() < 1e-18);
    assert!((0..3000).all(|e| lr_at(e + 1, &c) <= lr_at(e, &c)));
}

#[test]
fn batches_are_normalised_and_paired() {
    let white = Tensor::<f32>::full(Shape::new(1, 3, 8, 8), 1.0);
    assert!(normalize::<f32>(&white).data().iter().all(|&v| v == 0.5));
    let black = Tensor::<f32>::zeros(Shape::new(1, 3, 8, 8));
    assert!(normalize::<f32>(&black).data().iter().all(|&v| v == -0.5));

    let mut p = pairs(3, 1);
    for q in &mut p {
        q.blurry = q.sharp.clone();
    }
    let refs: Vec<&Pair> = p.iter().collect();
    let (b, s) = prepare_batch::<f32>(&refs, 16, &mut rng(2)).unwrap();
    assert_eq!(b.shape(), Shape::new(3, 3, 16, 16));
    assert_eq!(b, s);
    assert!(b.data().iter().all(|v| (-0.5..=0.5).contains(v)));
    assert!(prepare_batch::<f32>(&refs, 32, &mut rng(2)).is_err());
}

#[test]
fn config_is_checked_against_the_model() {
    let m = Model::<f32>::init(&tiny_spec(), 0).unwrap();
    let bad_crop = TrainConfig { crop: 12, ..tiny_config() };
    assert!(Trainer::new(m.clone(), bad_crop).is_err());
    let bad_dtype = TrainConfig { dtype: DType::F64, ..tiny_config() };
    assert!(Trainer::new(m.clone(), bad_dtype).is_err());
    let zero_batch = TrainConfig { batch_size: 0, ..tiny_config() };
    assert!(Trainer::new(m, zero_batch).is_err());
}

#[test]
fn equal_seeds_train_identically() {
    let data = pairs(6, 3);
    let run = || {
        let m = Model::<f32>::init(&tiny_spec(), 1).unwrap();
        let mut t = Trainer::new(m, TrainConfig { max_steps: Some(10), epochs: 6, ..tiny_config() }).unwrap();
        let rep = t.fit(&data, None, |_| {}).unwrap();
        (params(&t.model), rep.losses())
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la.len(), 10);
    assert!(la.iter().all(|l| l.is_finite()));
    assert_eq!(a, b);
    assert_eq!(la, lb);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let data = pairs(6, 4);
    let m = Model::<f32>::init(&tiny_spec(), 2).unwrap();
    let before = params(&m);
    let mut t = Trainer::new(m, TrainConfig { lr0: 0.0, epochs: 1, ..tiny_config() }).unwrap();
    let rep = t.fit(&data, None, |_| {}).unwrap();
    assert_eq!(rep.steps.len(), 3);
    assert_eq!(params(&t.model), before);
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let data = pairs(6, 5);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("run.ckpt");
    let cfg = tiny_config();

    let mut full = Trainer::new(Model::<f32>::init(&tiny_spec(), 3).unwrap(), cfg.clone()).unwrap();
    let full_losses = full.fit(&data, None, |_| {}).unwrap().losses();

    let mut first = Trainer::new(
        Model::<f32>::init(&tiny_spec(), 3).unwrap(),
        TrainConfig { max_steps: Some(4), ..cfg.clone() },
    )
    .unwrap();
    let mut losses = first.fit(&data, Some(&ckpt), |_| {}).unwrap().losses();
    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.meta.step, 4);
    let mut second = Trainer::<f32>::from_checkpoint(&loaded, Some(cfg)).unwrap();
    losses.extend(second.fit(&data, None, |_| {}).unwrap().losses());

    assert_eq!(losses, full_losses);
    assert_eq!(params(&second.model), params(&full.model));
    assert_eq!(second.adam, full.adam);
}

#[test]
fn divergence_aborts_and_keeps_the_last_good_state() {
    let data = pairs(4, 6);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    let mut m = Model::<f32>::init(&tiny_spec(), 4).unwrap();
    let mut ps = m.params_mut();
    *ps[0] = ps[0].map(|_| f32::INFINITY);
    drop(ps);
    let mut t = Trainer::new(m, tiny_config()).unwrap();
    let err = t.fit(&data, Some(&ckpt), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    let saved = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(saved.meta.step, 0);
}

#[test]
fn weight_shared_training_updates_one_pair() {
    let data = pairs(4, 7);
    let spec = tiny_spec().with_weight_sharing(true);
    let m = Model::<f32>::init(&spec, 5).unwrap();
    assert!(m.named_params().iter().all(|(n, _)| n.starts_with("shared.")));
    let before = params(&m);
    let mut t = Trainer::new(m, TrainConfig { max_steps: Some(2), ..tiny_config() }).unwrap();
    t.fit(&data, None, |_| {}).unwrap();
    assert_ne!(params(&t.model), before);
}
