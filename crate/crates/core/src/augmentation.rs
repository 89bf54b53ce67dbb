//! Seeded internal-example sampler.
//!
//! Structure views get a square crop, a horizontal flip, color jitter and a
//! `3×3` Gaussian blur; appearance views only the crop and the flip. Drawing
//! the random parameters ([`ViewParams`]) is separate from applying them, so
//! statistics can be checked without touching pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::image::ImageTensor;

pub const MIN_VIEW_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    /// Crop side as a fraction of the image height.
    pub crop_fraction_range: [f64; 2],
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness_range: [f64; 2],
    pub contrast_range: [f64; 2],
    pub saturation_range: [f64; 2],
    /// Hue shift as a fraction of the hue circle.
    pub hue_range: [f64; 2],
    pub blur_prob: f64,
    pub blur_kernel: usize,
    pub blur_sigma_range: [f64; 2],
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop_fraction_range: [0.95, 1.0],
            flip_prob: 0.5,
            jitter_prob: 0.5,
            brightness_range: [0.8, 1.2],
            contrast_range: [0.8, 1.2],
            saturation_range: [0.8, 1.2],
            hue_range: [-0.05, 0.05],
            blur_prob: 0.5,
            blur_kernel: 3,
            blur_sigma_range: [0.1, 2.0],
        }
    }
}

impl AugmentationPolicy {
    /// No randomness at all: full-height crop, no flip, jitter or blur.
    pub fn identity() -> Self {
        Self {
            crop_fraction_range: [1.0, 1.0],
            flip_prob: 0.0,
            jitter_prob: 0.0,
            blur_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("augmentation: {msg}")));
        for (name, p) in [("flip_prob", self.flip_prob), ("jitter_prob", self.jitter_prob), ("blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        let [lo, hi] = self.crop_fraction_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("crop_fraction_range must satisfy 0 < lo <= hi <= 1");
        }
        let [slo, shi] = self.blur_sigma_range;
        if !(slo > 0.0 && slo <= shi) {
            return bad("blur_sigma_range must be positive and ordered");
        }
        if self.blur_kernel % 2 == 0 {
            return bad("blur_kernel must be odd");
        }
        for (name, [a, b]) in [
            ("brightness_range", self.brightness_range),
            ("contrast_range", self.contrast_range),
            ("saturation_range", self.saturation_range),
        ] {
            if !(a >= 0.0 && a <= b) {
                return bad(&format!("{name} must be non-negative and ordered"));
            }
        }
        let [hlo, hhi] = self.hue_range;
        if !(-0.5..=0.5).contains(&hlo) || !(-0.5..=0.5).contains(&hhi) || hlo > hhi {
            return bad("hue_range must be ordered within [-0.5, 0.5]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

/// Random draws for one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    pub crop_size: usize,
    pub top: usize,
    pub left: usize,
    /// Crop side over image height.
    pub crop_fraction: f64,
    /// Set when the drawn side exceeded the image width and was clamped.
    pub clamped_to_width: bool,
    pub flipped: bool,
    pub jitter: Option<Jitter>,
    pub blur_sigma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Structure,
    Appearance,
}

fn uniform(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws the parameters of one view of a `height × width` image.
pub fn sample_params(
    kind: ViewKind,
    height: usize,
    width: usize,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<ViewParams> {
    if height < MIN_VIEW_SIDE || width < MIN_VIEW_SIDE {
        return Err(Error::ImageTooSmall {
            height,
            width,
            min: MIN_VIEW_SIDE,
        });
    }
    let [lo, hi] = policy.crop_fraction_range;
    let min_n = ((lo * height as f64) - 1e-9).ceil() as usize;
    let max_n = ((hi * height as f64) + 1e-9).floor() as usize;
    let drawn = if min_n >= max_n { max_n.max(1) } else { rng.random_range(min_n..=max_n) };
    let clamped = drawn > width;
    if clamped {
        log::warn!("crop side {drawn} exceeds image width {width}; clamping");
    }
    let n = drawn.min(width);
    let top = if height > n { rng.random_range(0..=height - n) } else { 0 };
    let left = if width > n { rng.random_range(0..=width - n) } else { 0 };
    let flipped = policy.flip_prob > 0.0 && rng.random::<f64>() < policy.flip_prob;
    let (jitter, blur_sigma) = match kind {
        ViewKind::Appearance => (None, None),
        ViewKind::Structure => {
            let jitter = if policy.jitter_prob > 0.0 && rng.random::<f64>() < policy.jitter_prob {
                Some(Jitter {
                    brightness: uniform(rng, policy.brightness_range),
                    contrast: uniform(rng, policy.contrast_range),
                    saturation: uniform(rng, policy.saturation_range),
                    hue: uniform(rng, policy.hue_range),
                })
            } else {
                None
            };
            let blur = if policy.blur_prob > 0.0 && rng.random::<f64>() < policy.blur_prob {
                Some(uniform(rng, policy.blur_sigma_range))
            } else {
                None
            };
            (jitter, blur)
        }
    };
    Ok(ViewParams {
        crop_size: n,
        top,
        left,
        crop_fraction: drawn as f64 / height as f64,
        clamped_to_width: clamped,
        flipped,
        jitter,
        blur_sigma,
    })
}

/// Applies drawn parameters to an image. Output values stay in `[0, 1]`.
pub fn apply_params(
    image: &ImageTensor,
    params: &ViewParams,
    kernel: usize,
    exec: ExecPolicy,
) -> Result<ImageTensor> {
    let mut out = image.crop(params.top, params.left, params.crop_size, params.crop_size)?;
    if params.flipped {
        out = out.flip_horizontal();
    }
    if let Some(j) = params.jitter {
        color_jitter(&mut out, &j, exec);
    }
    if let Some(sigma) = params.blur_sigma {
        out = gaussian_blur(&out, kernel, sigma, exec);
    }
    Ok(out)
}

pub fn sample_structure_view(
    image: &ImageTensor,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, ViewParams)> {
    let p = sample_params(ViewKind::Structure, image.height(), image.width(), policy, rng)?;
    Ok((apply_params(image, &p, policy.blur_kernel, ExecPolicy::default())?, p))
}

pub fn sample_appearance_view(
    image: &ImageTensor,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, ViewParams)> {
    let p = sample_params(ViewKind::Appearance, image.height(), image.width(), policy, rng)?;
    Ok((apply_params(image, &p, policy.blur_kernel, ExecPolicy::default())?, p))
}

/// Draws `count` independent parameter sets; sample `i` uses stream `i` of `seed`.
pub fn sample_params_batch(
    kind: ViewKind,
    height: usize,
    width: usize,
    policy: &AugmentationPolicy,
    seed: u64,
    count: usize,
    exec: ExecPolicy,
) -> Result<Vec<ViewParams>> {
    exec::try_map_indexed(exec, count, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        sample_params(kind, height, width, policy, &mut rng)
    })
}

/// Normalized 1-D Gaussian taps; the 2-D kernel is their outer product.
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        i = if i < 0 { -i } else { 2 * (n - 1) - i };
    }
    i as usize
}

pub fn gaussian_blur(image: &ImageTensor, kernel: usize, sigma: f64, exec: ExecPolicy) -> ImageTensor {
    let taps = gaussian_kernel_1d(kernel, sigma);
    let r = (kernel / 2) as isize;
    let (h, w) = (image.height(), image.width());
    let src = image.data();
    let mut tmp = vec![0f32; src.len()];
    exec::for_each_chunk_mut(exec, &mut tmp, w, |row, dst| {
        let base = row * w;
        for (x, o) in dst.iter_mut().enumerate() {
            let mut acc = 0f64;
            for (k, t) in taps.iter().enumerate() {
                let xx = reflect(x as isize + k as isize - r, w);
                acc += t * src[base + xx] as f64;
            }
            *o = acc as f32;
        }
    });
    let mut out = image.clone();
    exec::for_each_chunk_mut(exec, out.data_mut(), w, |row, dst| {
        let (c, y) = (row / h, row % h);
        for (x, o) in dst.iter_mut().enumerate() {
            let mut acc = 0f64;
            for (k, t) in taps.iter().enumerate() {
                let yy = reflect(y as isize + k as isize - r, h);
                acc += t * tmp[(c * h + yy) * w + x] as f64;
            }
            *o = (acc as f32).clamp(0.0, 1.0);
        }
    });
    out
}

fn gray(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation, then hue; clamped after every stage.
pub fn color_jitter(image: &mut ImageTensor, j: &Jitter, exec: ExecPolicy) {
    let plane = image.height() * image.width();
    let mut px: Vec<[f32; 3]> = (0..plane)
        .map(|i| {
            let d = image.data();
            [d[i], d[plane + i], d[2 * plane + i]]
        })
        .collect();
    let clamp = |v: f32| v.clamp(0.0, 1.0);
    let b = j.brightness as f32;
    for p in px.iter_mut() {
        for c in p.iter_mut() {
            *c = clamp(*c * b);
        }
    }
    let mean_gray = px.iter().map(|p| gray(p[0], p[1], p[2]) as f64).sum::<f64>() / plane as f64;
    let (ct, sat, hue) = (j.contrast as f32, j.saturation as f32, j.hue as f32);
    let row = image.width();
    exec::for_each_chunk_mut(exec, &mut px, row, |_, chunk| {
        for p in chunk.iter_mut() {
            for c in p.iter_mut() {
                *c = clamp(ct * *c + (1.0 - ct) * mean_gray as f32);
            }
            let g = gray(p[0], p[1], p[2]);
            for c in p.iter_mut() {
                *c = clamp(sat * *c + (1.0 - sat) * g);
            }
            if hue != 0.0 {
                let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
                let (r, g, b) = hsv_to_rgb(h + hue, s, v);
                *p = [clamp(r), clamp(g), clamp(b)];
            }
        }
    });
    let d = image.data_mut();
    for (i, p) in px.iter().enumerate() {
        d[i] = p[0];
        d[plane + i] = p[1];
        d[2 * plane + i] = p[2];
    }
}

/// The two random streams feeding one training run.
#[derive(Debug, Clone)]
pub struct AugmentationStreams {
    pub structure: ChaCha8Rng,
    pub appearance: ChaCha8Rng,
}

/// Serializable position of both streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamPositions {
    pub seed: u64,
    pub structure_word_pos: u128,
    pub appearance_word_pos: u128,
}

impl AugmentationStreams {
    const STRUCTURE_STREAM: u64 = 1;
    const APPEARANCE_STREAM: u64 = 2;

    pub fn new(seed: u64) -> Self {
        let mut structure = ChaCha8Rng::seed_from_u64(seed);
        structure.set_stream(Self::STRUCTURE_STREAM);
        let mut appearance = ChaCha8Rng::seed_from_u64(seed);
        appearance.set_stream(Self::APPEARANCE_STREAM);
        Self {
            structure,
            appearance,
        }
    }

    pub fn positions(&self, seed: u64) -> StreamPositions {
        StreamPositions {
            seed,
            structure_word_pos: self.structure.get_word_pos(),
            appearance_word_pos: self.appearance.get_word_pos(),
        }
    }

    pub fn restore(pos: &StreamPositions) -> Self {
        let mut s = Self::new(pos.seed);
        s.structure.set_word_pos(pos.structure_word_pos);
        s.appearance.set_word_pos(pos.appearance_word_pos);
        s
    }

    /// Next `{Ĩ_s, Ĩ_t}` pair.
    pub fn next_pair(
        &mut self,
        structure: &ImageTensor,
        appearance: &ImageTensor,
        policy: &AugmentationPolicy,
        exec: ExecPolicy,
    ) -> Result<(ImageTensor, ImageTensor)> {
        let ps = sample_params(ViewKind::Structure, structure.height(), structure.width(), policy, &mut self.structure)?;
        let pt = sample_params(ViewKind::Appearance, appearance.height(), appearance.width(), policy, &mut self.appearance)?;
        Ok((
            apply_params(structure, &ps, policy.blur_kernel, exec)?,
            apply_params(appearance, &pt, policy.blur_kernel, exec)?,
        ))
    }
}
