mod common;

use common::rng;
use dmphn::metrics::{psnr, ssim, PSNR_CAP};
use dmphn::{Shape, Tensor};
use proptest::prelude::*;
use rand::Rng;

/// SSIM with an explicit 2-D Gaussian window slid over every valid position.
fn ssim_direct(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let k = 11usize;
    let sigma = 1.5f64;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (y, x) = (i as f64 - 5.0, j as f64 - 5.0);
            win[i * k + j] = (-(y * y + x * x) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = win.iter().sum();
    win.iter_mut().for_each(|w| *w /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let s = a.shape();
    let mut acc = 0.0;
    for n in 0..s.n() {
        for c in 0..s.c() {
            let mut plane = 0.0;
            let mut count = 0;
            for oy in 0..=s.h() - k {
                for ox in 0..=s.w() - k {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let w = win[i * k + j];
                            let (p, q) = (a.at(n, c, oy + i, ox + j), b.at(n, c, oy + i, ox + j));
                            mx += w * p;
                            my += w * q;
                            xx += w * p * p;
                            yy += w * q * q;
                            xy += w * p * q;
                        }
                    }
                    let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                    plane += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    count += 1;
                }
            }
            acc += plane / count as f64;
        }
    }
    acc / (s.n() * s.c()) as f64
}

fn image(seed: u64, shape: Shape) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(0.0..1.0))
}

#[test]
fn psnr_by_formula() {
    let a = Tensor::<f64>::full(Shape::new(1, 3, 4, 4), 0.3);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let b = a.map(|v| v + 0.1);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    let zero = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
    let half = Tensor::<f64>::full(Shape::new(1, 3, 4, 4), 0.5);
    assert!((psnr(&zero, &half).unwrap() - 6.020599913279624).abs() < 1e-12);
    let tiny = a.map(|v| v + 1e-7);
    assert_eq!(psnr(&a, &tiny).unwrap(), PSNR_CAP);
}

#[test]
fn ssim_matches_the_direct_window_oracle() {
    let a = image(1, Shape::new(2, 3, 19, 23));
    let b = a.zip_map(&image(2, a.shape()), |p, q| 0.7 * p + 0.3 * q).unwrap();
    let fast = ssim(&a, &b).unwrap();
    let slow = ssim_direct(&a, &b);
    assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    let f32_fast = ssim(&a.cast::<f32>(), &b.cast::<f32>()).unwrap();
    assert!((f32_fast - slow).abs() < 1e-5);
}

#[test]
fn ssim_of_constant_images_has_a_closed_form() {
    let (p, q) = (0.2, 0.6);
    let a = Tensor::<f64>::full(Shape::new(1, 3, 12, 12), p);
    let b = Tensor::<f64>::full(Shape::new(1, 3, 12, 12), q);
    let c1 = 0.01f64.powi(2);
    let expected = (2.0 * p * q + c1) / (p * p + q * q + c1);
    assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn ssim_of_an_image_with_itself_is_one() {
    let a = image(3, Shape::new(1, 3, 16, 16));
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ssim_rejects_small_images() {
    let a = Tensor::<f64>::zeros(Shape::new(1, 3, 10, 40));
    assert!(ssim(&a, &a).is_err());
}

proptest! {
    #[test]
    fn metrics_are_symmetric(seed in any::<u64>()) {
        let a = image(seed, Shape::new(1, 2, 12, 13));
        let b = image(seed ^ 1, a.shape());
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_bounded_and_continuous(seed in any::<u64>(), eps in 1e-9f64..1e-6) {
        let a = image(seed, Shape::new(1, 1, 14, 14));
        let b = image(seed ^ 7, a.shape());
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        let b2 = b.map(|v| v + eps);
        prop_assert!((ssim(&a, &b2).unwrap() - s).abs() < 1e3 * eps);
    }
}
