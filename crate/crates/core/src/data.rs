//! Image I/O, synthetic motion blur and the on-disk pair layout
//! `root/{train,test}/{blur,sharp}/NNNNNN.png` with a `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::derive_seed;
use crate::tensor::{Shape, Tensor};

/// Reads an 8-bit RGB image (PNG or binary PPM) as `1 x 3 x H x W` in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(Shape::new(1, 3, h, w), |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f32::from(raw[p * 3 + c]) / 255.0
    })
}

/// Clamps to `[0, 1]` and rounds half-to-even onto 0..=255.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

pub fn to_rgb8(t: &Tensor<f32>) -> Result<RgbImage> {
    let s = t.shape();
    if s.n() != 1 || s.c() != 3 {
        return Err(Error::Geometry {
            op: "to_rgb8",
            reason: format!("expected a 1x3xHxW image, got {s}"),
        });
    }
    let plane = s.plane();
    let d = t.data();
    let mut buf = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            buf.push(quantize(d[c * plane + p]));
        }
    }
    RgbImage::from_raw(s.w() as u32, s.h() as u32, buf).ok_or_else(|| Error::Geometry {
        op: "to_rgb8",
        reason: "buffer size".into(),
    })
}

/// Writes a `1 x 3 x H x W` image; the format follows the extension (`png`, `ppm`).
pub fn save_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let img = to_rgb8(t)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Writes a single-plane `1 x 1 x H x W` map as grey RGB.
pub fn save_gray(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let s = t.shape();
    let rgb = Tensor::from_fn(Shape::new(1, 3, s.h(), s.w()), |i| t.data()[i % s.plane()]);
    save_image(&rgb, path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    RandomWalk,
    Linear,
    Custom,
}

/// Per-frame camera offsets `(dy, dx)` in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub offsets: Vec<(f64, f64)>,
}

/// Index of the frame used as the sharp target.
pub fn middle_frame(k: usize) -> usize {
    k.div_ceil(2) - 1
}

impl Trajectory {
    /// Offsets shifted so the middle frame sits at the origin.
    pub fn centered(kind: TrajectoryKind, offsets: Vec<(f64, f64)>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::Config("a trajectory needs at least one frame".into()));
        }
        let (my, mx) = offsets[middle_frame(offsets.len())];
        Ok(Trajectory {
            kind,
            offsets: offsets.iter().map(|&(y, x)| (y - my, x - mx)).collect(),
        })
    }

    /// Random-walk camera velocity: initial speed uniform in
    /// `[d_max / 4, d_max]` with a random heading, Gaussian velocity jitter
    /// each frame, speed clamped to `d_max` pixels per frame.
    pub fn random_walk(k: usize, d_max: f64, rng: &mut impl Rng) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("frame count must be at least 1".into()));
        }
        let jitter = Normal::new(0.0, 0.25 * d_max.max(f64::MIN_POSITIVE)).expect("positive sigma");
        let heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let speed = rng.gen_range(0.25..=1.0) * d_max;
        let (mut vy, mut vx) = (speed * heading.sin(), speed * heading.cos());
        let (mut y, mut x) = (0.0, 0.0);
        let mut offsets = Vec::with_capacity(k);
        for _ in 0..k {
            offsets.push((y, x));
            vy += jitter.sample(rng);
            vx += jitter.sample(rng);
            let norm = (vy * vy + vx * vx).sqrt();
            if norm > d_max {
                vy *= d_max / norm;
                vx *= d_max / norm;
            }
            y += vy;
            x += vx;
        }
        Self::centered(TrajectoryKind::RandomWalk, offsets)
    }

    /// `k` frames evenly spread over `length` pixels along `angle` radians.
    pub fn linear(k: usize, length: f64, angle: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("frame count must be at least 1".into()));
        }
        let step = if k > 1 { length / (k - 1) as f64 } else { 0.0 };
        let offsets = (0..k)
            .map(|i| (i as f64 * step * angle.sin(), i as f64 * step * angle.cos()))
            .collect();
        Self::centered(TrajectoryKind::Linear, offsets)
    }

    pub fn frames(&self) -> usize {
        self.offsets.len()
    }
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Frame seen by a camera displaced by `(dy, dx)`: pixel `(r, c)` samples
/// the image at `(r + dy, c + dx)` bilinearly, reflecting at the borders.
pub fn translate(img: &Tensor<f32>, dy: f64, dx: f64) -> Tensor<f32> {
    let s = img.shape();
    let (h, w) = (s.h(), s.w());
    let (fy, fx) = (dy.floor(), dx.floor());
    let (ty, tx) = (dy - fy, dx - fx);
    let (iy, ix) = (fy as isize, fx as isize);
    let rows: Vec<(usize, usize)> = (0..h as isize)
        .map(|r| (reflect_index(r + iy, h), reflect_index(r + iy + 1, h)))
        .collect();
    let cols: Vec<(usize, usize)> = (0..w as isize)
        .map(|c| (reflect_index(c + ix, w), reflect_index(c + ix + 1, w)))
        .collect();
    let d = img.data();
    let mut out = Vec::with_capacity(s.numel());
    for plane in d.chunks_exact(h * w) {
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let v = if ty == 0.0 && tx == 0.0 {
                    f64::from(plane[r0 * w + c0])
                } else {
                    let top = f64::from(plane[r0 * w + c0]) * (1.0 - tx) + f64::from(plane[r0 * w + c1]) * tx;
                    let bot = f64::from(plane[r1 * w + c0]) * (1.0 - tx) + f64::from(plane[r1 * w + c1]) * tx;
                    top * (1.0 - ty) + bot * ty
                };
                out.push(v as f32);
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

/// Average of the frames along `trajectory`.
pub fn synth_blur(sharp: &Tensor<f32>, trajectory: &Trajectory) -> Result<Tensor<f32>> {
    let k = trajectory.frames();
    if k == 0 {
        return Err(Error::Config("frame count must be at least 1".into()));
    }
    let mut acc = vec![0.0f64; sharp.numel()];
    for &(dy, dx) in &trajectory.offsets {
        let f = translate(sharp, dy, dx);
        acc.iter_mut().zip(f.data()).for_each(|(a, &v)| *a += f64::from(v));
    }
    let out = acc.into_iter().map(|v| (v / k as f64) as f32).collect();
    Tensor::from_vec(sharp.shape(), out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurMeta {
    pub frames: usize,
    pub trajectory_seed: u64,
    pub trajectory: TrajectoryKind,
}

/// A blurry image, its sharp target and how the blur was made.
#[derive(Clone, Debug)]
pub struct BlurSample {
    pub blurry: Tensor<f32>,
    pub sharp: Tensor<f32>,
    pub meta: BlurMeta,
}

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

fn random_color(rng: &mut impl Rng) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// Procedural scene: a colour gradient, filled rectangles and ellipses, and
/// thin pen strokes. Returned already quantised to 8 bits.
pub fn procedural_image(h: usize, w: usize, rng: &mut impl Rng) -> RgbImage {
    let (c0, c1) = (random_color(rng), random_color(rng));
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let diag = (h * h + w * w) as f32;
    let mut px = vec![[0f32; 3]; h * w];
    for r in 0..h {
        for c in 0..w {
            let t = ((c as f32 * ca + r as f32 * sa) / diag.sqrt() + 1.0) / 2.0;
            px[r * w + c] = lerp(c0, c1, t.clamp(0.0, 1.0));
        }
    }
    let shapes = rng.gen_range(3..=6);
    for _ in 0..shapes {
        let color = random_color(rng);
        let (cy, cx) = (rng.gen_range(0.0..h as f32), rng.gen_range(0.0..w as f32));
        let (ry, rx) = (
            rng.gen_range(2.0..(h as f32 / 3.0).max(3.0)),
            rng.gen_range(2.0..(w as f32 / 3.0).max(3.0)),
        );
        let ellipse = rng.gen_bool(0.5);
        for r in 0..h {
            for c in 0..w {
                let (dy, dx) = ((r as f32 - cy) / ry, (c as f32 - cx) / rx);
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    px[r * w + c] = color;
                }
            }
        }
    }
    let strokes = rng.gen_range(2..=5);
    for _ in 0..strokes {
        let color = random_color(rng);
        let (mut y, mut x) = (rng.gen_range(0.0..h as f32), rng.gen_range(0.0..w as f32));
        let mut heading: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let width: f32 = rng.gen_range(0.5..1.5);
        let len = rng.gen_range(8..=24);
        for _ in 0..len * 2 {
            heading += rng.gen_range(-0.4..0.4);
            y += 0.5 * heading.sin();
            x += 0.5 * heading.cos();
            let (r0, r1) = ((y - width).floor().max(0.0) as usize, (y + width).ceil().max(0.0) as usize);
            let (q0, q1) = ((x - width).floor().max(0.0) as usize, (x + width).ceil().max(0.0) as usize);
            for r in r0..=r1.min(h.saturating_sub(1)) {
                for c in q0..=q1.min(w.saturating_sub(1)) {
                    if (r as f32 - y).powi(2) + (c as f32 - x).powi(2) <= width * width {
                        px[r * w + c] = color;
                    }
                }
            }
        }
    }
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, p) in px.iter().enumerate() {
        img.put_pixel((i % w) as u32, (i / w) as u32, Rgb(p.map(quantize)));
    }
    img
}

/// Settings for [`gen_dataset`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub frames_min: usize,
    pub frames_max: usize,
    /// Largest camera speed in pixels per frame.
    pub d_max: f64,
    /// Share of pairs placed in the test split.
    pub test_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 128,
            height: 64,
            width: 64,
            seed: 0,
            frames_min: 7,
            frames_max: 13,
            d_max: 2.0,
            test_fraction: 0.25,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return Err(Error::Config(format!(
                "invalid frame range {}..={}",
                self.frames_min, self.frames_max
            )));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test fraction must lie in [0, 1]".into()));
        }
        if !(self.d_max >= 0.0 && self.d_max.is_finite()) {
            return Err(Error::Config("d_max must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn test_count(&self) -> usize {
        ((self.count as f64 * self.test_fraction).round() as usize).min(self.count)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub blur: String,
    pub sharp: String,
    #[serde(flatten)]
    pub meta: BlurMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GenConfig,
    pub train: usize,
    pub test: usize,
    pub pairs: Vec<ManifestEntry>,
}

/// Generates sample `index` of a synthetic set.
pub fn gen_sample(config: &GenConfig, index: usize) -> Result<BlurSample> {
    let trajectory_seed = derive_seed(config.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(trajectory_seed);
    let sharp = from_rgb8(&procedural_image(config.height, config.width, &mut rng));
    let k = rng.gen_range(config.frames_min..=config.frames_max);
    let traj = Trajectory::random_walk(k, config.d_max, &mut rng)?;
    let blurry = synth_blur(&sharp, &traj)?;
    Ok(BlurSample {
        blurry,
        sharp,
        meta: BlurMeta {
            frames: k,
            trajectory_seed,
            trajectory: traj.kind,
        },
    })
}

/// Writes a synthetic set under `out` and returns its manifest. The last
/// `test_count()` samples form the test split.
pub fn gen_dataset(out: &Path, config: &GenConfig) -> Result<Manifest> {
    config.validate()?;
    let n_test = config.test_count();
    let n_train = config.count - n_test;
    for split in [Split::Train, Split::Test] {
        for kind in ["blur", "sharp"] {
            fs::create_dir_all(out.join(split.dir()).join(kind))?;
        }
    }
    let pairs = (0..config.count)
        .into_par_iter()
        .map(|i| {
            let sample = gen_sample(config, i)?;
            let (split, local) = if i < n_train { (Split::Train, i) } else { (Split::Test, i - n_train) };
            let name = format!("{local:06}.png");
            let blur = format!("{}/blur/{name}", split.dir());
            let sharp = format!("{}/sharp/{name}", split.dir());
            save_image(&sample.blurry, &out.join(&blur))?;
            save_image(&sample.sharp, &out.join(&sharp))?;
            Ok(ManifestEntry {
                split,
                blur,
                sharp,
                meta: sample.meta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        config: config.clone(),
        train: n_train,
        test: n_test,
        pairs,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A blurry/sharp pair loaded from disk.
#[derive(Clone, Debug)]
pub struct Pair {
    pub name: String,
    pub blurry: Tensor<f32>,
    pub sharp: Tensor<f32>,
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads `root/<split>/blur/*` with the same-named files under `sharp/`.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<Pair>> {
    let base = root.join(split.dir());
    let files = image_files(&base.join("blur"))?;
    files
        .par_iter()
        .map(|blur_path| {
            let name = blur_path
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Dataset(format!("bad file name {}", blur_path.display())))?
                .to_string();
            let sharp_path = base.join("sharp").join(&name);
            if !sharp_path.exists() {
                return Err(Error::Dataset(format!("no sharp image for {}", blur_path.display())));
            }
            let blurry = load_image(blur_path)?;
            let sharp = load_image(&sharp_path)?;
            if blurry.shape() != sharp.shape() {
                return Err(Error::Dataset(format!(
                    "{name}: blurry {} and sharp {} differ in size",
                    blurry.shape(),
                    sharp.shape()
                )));
            }
            Ok(Pair { name, blurry, sharp })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_handles_negatives() {
        let v: Vec<usize> = (-3..6).map(|i| reflect_index(i, 3)).collect();
        assert_eq!(v, [1, 2, 1, 0, 1, 2, 1, 0, 1]);
    }

    #[test]
    fn middle_frame_indices() {
        assert_eq!(middle_frame(1), 0);
        assert_eq!(middle_frame(3), 1);
        assert_eq!(middle_frame(4), 1);
        assert_eq!(middle_frame(13), 6);
    }

    #[test]
    fn quantize_rounds_half_to_even() {
        assert_eq!(quantize(-0.1), 0);
        assert_eq!(quantize(1.3), 255);
        assert_eq!(quantize(0.5 / 255.0), 0);
        assert_eq!(quantize(1.5 / 255.0), 2);
    }

    #[test]
    fn random_walk_respects_speed_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Trajectory::random_walk(13, 2.0, &mut rng).unwrap();
        assert_eq!(t.offsets[middle_frame(13)], (0.0, 0.0));
        for p in t.offsets.windows(2) {
            let d = ((p[1].0 - p[0].0).powi(2) + (p[1].1 - p[0].1).powi(2)).sqrt();
            assert!(d <= 2.0 + 1e-12);
        }
    }
}
