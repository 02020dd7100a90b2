mod common;

use std::fs;
use std::path::Path;

use dmphn::data::{
    gen_dataset, gen_sample, load_image, load_split, procedural_image, from_rgb8, save_image, synth_blur, translate,
    GenConfig, Split, Trajectory, TrajectoryKind,
};
use dmphn::metrics::psnr;
use dmphn::{Shape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mean PSNR(blurry, sharp) over the first 32 seed-0 samples, measured once.
const SEED0_PSNR: f64 = 21.695142;
const SEED0_PSNR_TOL: f64 = 0.01;

fn scene(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    from_rgb8(&procedural_image(h, w, &mut ChaCha8Rng::seed_from_u64(seed)))
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for split in ["train", "test"] {
        for kind in ["blur", "sharp"] {
            let dir = root.join(split).join(kind);
            let mut names: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
            names.sort();
            for p in names {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out
}

#[test]
fn ppm_with_known_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.ppm");
    let pixels = [0u8, 51, 255, 10, 20, 30, 128, 64, 32, 1, 2, 254];
    let mut bytes = b"P6\n2 2\n255\n".to_vec();
    bytes.extend_from_slice(&pixels);
    fs::write(&path, bytes).unwrap();
    let t = load_image(&path).unwrap();
    assert_eq!(t.shape(), Shape::new(1, 3, 2, 2));
    for (i, &p) in pixels.iter().enumerate() {
        let (pix, ch) = (i / 3, i % 3);
        assert_eq!(t.at(0, ch, pix / 2, pix % 2), p as f32 / 255.0);
    }
}

#[test]
fn png_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    procedural_image(17, 23, &mut ChaCha8Rng::seed_from_u64(1)).save(&a).unwrap();
    save_image(&load_image(&a).unwrap(), &b).unwrap();
    let pa = image::open(&a).unwrap().to_rgb8();
    let pb = image::open(&b).unwrap().to_rgb8();
    assert_eq!(pa.as_raw(), pb.as_raw());
}

#[test]
fn saving_clamps_out_of_range_values() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.png");
    let t = Tensor::from_vec(Shape::new(1, 3, 1, 2), vec![-0.1, 1.3, 0.0, 1.0, 0.5, 2.0]).unwrap();
    save_image(&t, &p).unwrap();
    let back = image::open(&p).unwrap().to_rgb8();
    assert_eq!(back.get_pixel(0, 0).0, [0, 0, 128]);
    assert_eq!(back.get_pixel(1, 0).0, [255, 255, 255]);
}

#[test]
fn load_rejects_truncated_and_unknown_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.ppm");
    fs::write(&p, b"P6\n4 4\n255\n\x01\x02").unwrap();
    assert!(load_image(&p).is_err());
    let q = dir.path().join("u.png");
    fs::write(&q, b"not an image").unwrap();
    assert!(load_image(&q).is_err());
}

#[test]
fn single_frame_and_static_camera_leave_the_image_sharp() {
    let img = scene(2, 24, 24);
    let one = Trajectory::centered(TrajectoryKind::Custom, vec![(0.7, -1.3)]).unwrap();
    assert_eq!(synth_blur(&img, &one).unwrap(), img);
    for k in [1, 4, 13] {
        let still = Trajectory::linear(k, 0.0, 1.0).unwrap();
        assert_eq!(synth_blur(&img, &still).unwrap(), img, "K={k}");
    }
}

#[test]
fn three_tap_horizontal_blur_of_a_step_edge() {
    let (h, w) = (6, 16);
    let edge = Tensor::from_fn(Shape::new(1, 3, h, w), |i| if i % w >= 8 { 1.0 } else { 0.0 });
    let t = Trajectory::centered(TrajectoryKind::Custom, vec![(0.0, -1.0), (0.0, 0.0), (0.0, 1.0)]).unwrap();
    let out = synth_blur(&edge, &t).unwrap();
    for c in 0..3 {
        for r in 0..h {
            for col in 1..w - 1 {
                let hand = (edge.at(0, c, r, col - 1) + edge.at(0, c, r, col) + edge.at(0, c, r, col + 1)) / 3.0;
                assert!((out.at(0, c, r, col) - hand).abs() < 1e-7, "({r},{col})");
            }
        }
        assert!((out.at(0, c, 0, 7) - 1.0 / 3.0).abs() < 1e-7);
        assert!((out.at(0, c, 0, 8) - 2.0 / 3.0).abs() < 1e-7);
    }
}

#[test]
fn longer_blur_never_raises_psnr() {
    let img = scene(3, 48, 48);
    let mut last = f64::INFINITY;
    for len in [0.0, 1.0, 2.0, 4.0] {
        let t = Trajectory::linear(9, len, 0.4).unwrap();
        let p = psnr(&synth_blur(&img, &t).unwrap(), &img).unwrap();
        assert!(p <= last, "length {len}: {p} > {last}");
        last = p;
    }
}

#[test]
fn averaging_conserves_frame_intensity() {
    let img = scene(4, 32, 40);
    let t = Trajectory::random_walk(9, 2.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let blurry = synth_blur(&img, &t).unwrap();
    let mean = |x: &Tensor<f32>| x.data().iter().map(|&v| f64::from(v)).sum::<f64>() / x.numel() as f64;
    let frames: f64 = t.offsets.iter().map(|&(dy, dx)| mean(&translate(&img, dy, dx))).sum::<f64>() / 9.0;
    assert!((mean(&blurry) - frames).abs() < 1e-6);
    // A periodic image shifted by whole periods is its own translate.
    let stripes = Tensor::from_fn(Shape::new(1, 1, 8, 8), |i| ((i % 8) % 2) as f32);
    assert_eq!(translate(&stripes, 0.0, 2.0).data()[9..15], stripes.data()[9..15]);
}

#[test]
fn generation_is_reproducible_and_split_by_ratio() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = GenConfig {
        count: 10,
        height: 16,
        width: 24,
        ..GenConfig::default()
    };
    let m = gen_dataset(a.path(), &cfg).unwrap();
    gen_dataset(b.path(), &cfg).unwrap();
    assert_eq!(files_under(a.path()), files_under(b.path()));
    assert_eq!(
        fs::read(a.path().join("manifest.json")).unwrap(),
        fs::read(b.path().join("manifest.json")).unwrap()
    );
    assert_eq!(m.pairs.len(), 10);
    assert_eq!((m.train, m.test), (7, 3));
    assert!(m.pairs.iter().all(|p| (7..=13).contains(&p.meta.frames)));
    let train = load_split(a.path(), Split::Train).unwrap();
    let test = load_split(a.path(), Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (7, 3));
    assert_eq!(test[0].name, "000000.png");
    assert_eq!(train[0].blurry.shape(), Shape::new(1, 3, 16, 24));

    fs::remove_file(a.path().join("test/sharp/000001.png")).unwrap();
    assert!(load_split(a.path(), Split::Test).is_err());
}

#[test]
fn single_frame_sets_are_sharp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        count: 4,
        height: 16,
        width: 16,
        frames_min: 1,
        frames_max: 1,
        ..GenConfig::default()
    };
    gen_dataset(dir.path(), &cfg).unwrap();
    for split in [Split::Train, Split::Test] {
        for p in load_split(dir.path(), split).unwrap() {
            assert_eq!(p.blurry, p.sharp);
        }
    }
}

#[test]
fn seed_zero_blur_strength_is_frozen() {
    let cfg = GenConfig {
        count: 32,
        ..GenConfig::default()
    };
    let mean = (0..32)
        .map(|i| {
            let s = gen_sample(&cfg, i).unwrap();
            psnr(&s.blurry, &s.sharp).unwrap()
        })
        .sum::<f64>()
        / 32.0;
    assert!((mean - SEED0_PSNR).abs() < SEED0_PSNR_TOL, "mean PSNR {mean}");
}

#[test]
fn bad_generator_settings_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        GenConfig { count: 0, ..GenConfig::default() },
        GenConfig { frames_min: 0, ..GenConfig::default() },
        GenConfig { frames_min: 9, frames_max: 7, ..GenConfig::default() },
    ] {
        assert!(gen_dataset(dir.path(), &cfg).is_err());
    }
    assert!(Trajectory::random_walk(0, 2.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

proptest! {
    #[test]
    fn random_walks_respect_the_speed_cap(k in 1usize..14, d_max in 0.1f64..4.0, seed in any::<u64>()) {
        let t = Trajectory::random_walk(k, d_max, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(t.frames(), k);
        prop_assert_eq!(t.offsets[(k + 1) / 2 - 1], (0.0, 0.0));
        for w in t.offsets.windows(2) {
            let (dy, dx) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            prop_assert!((dy * dy + dx * dx).sqrt() <= d_max * (1.0 + 1e-12));
        }
    }

    #[test]
    fn integer_translation_moves_pixels(dy in -3i32..4, dx in -3i32..4, seed in 0u64..50) {
        let img = scene(seed, 12, 12);
        let out = translate(&img, f64::from(dy), f64::from(dx));
        for r in 3..9usize {
            for c in 3..9usize {
                let (sr, sc) = ((r as i32 + dy) as usize, (c as i32 + dx) as usize);
                prop_assert_eq!(out.at(0, 1, r, c), img.at(0, 1, sr, sc));
            }
        }
    }
}
