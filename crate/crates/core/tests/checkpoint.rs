use dmphn::blocks::CodecConfig;
use dmphn::checkpoint::{Checkpoint, CheckpointMeta, MAGIC, VERSION};
use dmphn::model::{Model, ModelSpec};
use dmphn::{CheckpointError, Error};

fn spec(pattern: &str) -> ModelSpec {
    ModelSpec::dmphn(pattern).with_codec(CodecConfig::desk())
}

fn meta(spec: &ModelSpec) -> CheckpointMeta {
    CheckpointMeta {
        model: spec.clone(),
        train: None,
        epoch: 2,
        step: 17,
        rng_seed: 9,
        adam_step: 17,
    }
}

fn sample() -> (Model<f32>, Checkpoint) {
    let s = spec("1-2");
    let m = Model::<f32>::init(&s, 7).unwrap();
    let c = Checkpoint::from_model(&m, meta(&s));
    (m, c)
}

fn ckpt_err(bytes: &[u8]) -> CheckpointError {
    match Checkpoint::from_bytes(bytes) {
        Err(Error::Checkpoint(e)) => e,
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn save_load_round_trip_is_bitwise() {
    let (m, c) = sample();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.ckpt");
    c.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back, c);
    let restored = back.to_model::<f32>().unwrap();
    assert_eq!(restored.named_params(), m.named_params());
    let q = dir.path().join("b.ckpt");
    back.save(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
}

#[test]
fn double_precision_round_trip() {
    let s = spec("1");
    let m = Model::<f64>::init(&s, 1).unwrap();
    let c = Checkpoint::from_model(&m, meta(&s));
    let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
    assert_eq!(back.to_model::<f64>().unwrap().named_params(), m.named_params());
    assert!(matches!(back.to_model::<f32>(), Err(Error::Checkpoint(CheckpointError::DType { .. }))));
}

#[test]
fn header_layout() {
    let (_, c) = sample();
    let b = c.to_bytes().unwrap();
    assert_eq!(&b[..4], &MAGIC);
    assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
    let meta_len = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
    let json: serde_json::Value = serde_json::from_slice(&b[16..16 + meta_len]).unwrap();
    assert_eq!(json["model"]["pattern"], "1-2");
    assert_eq!(json["step"], 17);
    let count = u32::from_le_bytes(b[16 + meta_len..20 + meta_len].try_into().unwrap());
    assert_eq!(count as usize, c.tensors.len());
    let crc = u32::from_le_bytes(b[b.len() - 4..].try_into().unwrap());
    assert_eq!(crc, crc32fast::hash(&b[4..b.len() - 4]));
}

#[test]
fn corrupt_files_give_distinct_errors() {
    let (_, c) = sample();
    let good = c.to_bytes().unwrap();

    let mut b = good.clone();
    b[0] = b'X';
    assert!(matches!(ckpt_err(&b), CheckpointError::BadMagic(_)));

    let mut b = good.clone();
    b[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(ckpt_err(&b), CheckpointError::VersionMismatch { found: 7, expected: 1 }));

    assert!(matches!(ckpt_err(&good[..good.len() / 2]), CheckpointError::Truncated { .. }));
    assert!(matches!(ckpt_err(&good[..2]), CheckpointError::Truncated { .. }));

    let mut b = good.clone();
    let mid = b.len() / 2;
    b[mid] ^= 0x10;
    assert!(matches!(ckpt_err(&b), CheckpointError::Checksum { .. }));

    let mut b = good.clone();
    b.push(0);
    assert!(matches!(ckpt_err(&b), CheckpointError::Malformed(_)));
}

#[test]
fn absurd_dimensions_overflow() {
    let meta = serde_json::to_vec(&meta(&spec("1"))).unwrap();
    let mut b = MAGIC.to_vec();
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    b.extend_from_slice(&meta);
    b.extend_from_slice(&1u32.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.push(b'w');
    b.push(0);
    b.push(2);
    b.extend_from_slice(&u64::MAX.to_le_bytes());
    b.extend_from_slice(&4u64.to_le_bytes());
    assert!(matches!(ckpt_err(&b), CheckpointError::DimensionOverflow { .. }));
}

#[test]
fn cross_pattern_load_names_the_tensor_and_leaves_the_model_alone() {
    let (_, c) = sample();
    let mut deeper = Model::<f32>::init(&spec("1-2-4"), 3).unwrap();
    let before: Vec<_> = deeper.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
    match c.load_into(&mut deeper) {
        Err(Error::Checkpoint(CheckpointError::TensorShape { name, .. })) => assert!(name.starts_with("l3."), "{name}"),
        other => panic!("expected a shape error, got {other:?}"),
    }
    let after: Vec<_> = deeper.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
    assert_eq!(before, after);

    let wide = Model::<f32>::init(&ModelSpec::dmphn("1-2"), 0).unwrap();
    let mut narrow = Model::<f32>::init(&spec("1-2"), 0).unwrap();
    let wide_ckpt = Checkpoint::from_model(&wide, meta(wide.spec()));
    match wide_ckpt.load_into(&mut narrow) {
        Err(Error::Checkpoint(CheckpointError::TensorShape { name, expected, found })) => {
            assert_eq!(name, "l1.enc.0.weight");
            assert_eq!(expected, vec![8, 3, 3, 3]);
            assert_eq!(found, vec![32, 3, 3, 3]);
        }
        other => panic!("expected a shape error, got {other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(
        Checkpoint::load(std::path::Path::new("/nonexistent/x.ckpt")),
        Err(Error::Io(_))
    ));
}
