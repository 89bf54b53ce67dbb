//! Host-side RGB images and bicubic resampling.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};

/// Three-channel image stored planar (channel, row, column) with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "expected {} values for a {height}x{width} image, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {} at flat index {pos} is outside [0, 1]",
                data[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image from `f(channel, row, col)`; results are clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(Self::CHANNELS * height * width);
        for c in 0..Self::CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::from_fn(height, width, |_, _, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn from_rgb8(rgb: &image::RgbImage) -> Self {
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Self::from_fn(h, w, |c, y, x| {
            rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        })
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Writes an 8-bit image; the format follows the file extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, Self::CHANNELS, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => {
                return Err(Error::Shape(format!(
                    "expected (3,H,W) or (1,3,H,W), got {:?}",
                    t.dims()
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        if c != Self::CHANNELS {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                component: "image".into(),
                iteration: 0,
                diagnostic: None,
            });
        }
        Ok(Self {
            height: h,
            width: w,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |c, y, x| {
            self.get(c, y, self.width - 1 - x)
        })
    }

    /// Bicubic resize with the same kernel used inside the feature pipeline.
    pub fn resize(&self, height: usize, width: usize, policy: ExecPolicy) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("resize target must be positive".into()));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let rw = bicubic_matrix(self.width, width);
        let rh = bicubic_matrix(self.height, height);
        let (ih, iw) = (self.height, self.width);

        // Horizontal pass: one row per work item.
        let mut tmp = vec![0f64; Self::CHANNELS * ih * width];
        exec::for_each_chunk_mut(policy, &mut tmp, width, |row, out| {
            let src = &self.data[row * iw..(row + 1) * iw];
            for (x, o) in out.iter_mut().enumerate() {
                let weights = &rw[x * iw..(x + 1) * iw];
                *o = weights
                    .iter()
                    .zip(src)
                    .map(|(w, &v)| w * v as f64)
                    .sum();
            }
        });

        // Vertical pass.
        let mut data = vec![0f32; Self::CHANNELS * height * width];
        exec::for_each_chunk_mut(policy, &mut data, width, |row, out| {
            let (c, y) = (row / height, row % height);
            let weights = &rh[y * ih..(y + 1) * ih];
            for (x, o) in out.iter_mut().enumerate() {
                let mut acc = 0f64;
                for (sy, w) in weights.iter().enumerate() {
                    if *w != 0.0 {
                        acc += w * tmp[(c * ih + sy) * width + x];
                    }
                }
                *o = (acc as f32).clamp(0.0, 1.0);
            }
        });
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// SHA-256 over dimensions and pixel bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

const CUBIC_A: f64 = -0.75;

fn cubic(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        ((CUBIC_A + 2.0) * t - (CUBIC_A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((CUBIC_A * t - 5.0 * CUBIC_A) * t + 8.0 * CUBIC_A) * t - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Dense `(out_len, in_len)` row-major bicubic interpolation matrix.
///
/// Half-pixel sample centers, border samples clamped (replicated edge); each row sums to 1.
/// Equal sizes give the identity.
pub fn bicubic_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0f64; out_len * in_len];
    if in_len == out_len {
        for i in 0..in_len {
            m[i * in_len + i] = 1.0;
        }
        return m;
    }
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let t = src - base;
        for k in -1i64..=2 {
            let w = cubic(t - k as f64);
            let idx = (base as i64 + k).clamp(0, in_len as i64 - 1) as usize;
            m[o * in_len + idx] += w;
        }
    }
    m
}

/// Bicubic matrix as a tensor of shape `(out_len, in_len)`.
pub fn bicubic_matrix_tensor(
    in_len: usize,
    out_len: usize,
    device: &Device,
    dtype: DType,
) -> Result<Tensor> {
    let m = bicubic_matrix(in_len, out_len);
    Ok(Tensor::from_vec(m, (out_len, in_len), device)?.to_dtype(dtype)?)
}

/// Differentiable bicubic resize of a `(B, C, H, W)` tensor: `R_h · X · R_wᵀ`.
pub fn resize_tensor(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == height && w == width {
        return Ok(x.clone());
    }
    let (dev, dt) = (x.device(), x.dtype());
    let mut out = x.clone();
    if h != height {
        let rh = bicubic_matrix_tensor(h, height, dev, dt)?;
        out = rh.broadcast_matmul(&out)?;
    }
    if w != width {
        let rw = bicubic_matrix_tensor(w, width, dev, dt)?.t()?;
        out = out.broadcast_matmul(&rw)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, |c, y, x| {
            (0.2 * c as f32 + 0.5 * y as f32 / h as f32 + 0.3 * x as f32 / w as f32) / 1.5
        })
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImageTensor::new(1, 1, vec![0.0, 0.5, 1.5]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, f32::NAN, 1.0]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, 0.5]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0, 0.5, 1.0]).is_ok());
    }

    #[test]
    fn bicubic_rows_sum_to_one() {
        for (i, o) in [(7, 13), (128, 224), (300, 224), (5, 2)] {
            let m = bicubic_matrix(i, o);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "{i}->{o} row {r} sums to {s}");
            }
        }
    }

    #[test]
    fn same_size_resize_is_identity() {
        let img = gradient_image(12, 9);
        assert_eq!(img.resize(12, 9, ExecPolicy::Parallel).unwrap(), img);
    }

    #[test]
    fn constant_image_survives_resize() {
        let img = ImageTensor::filled(10, 14, 0.25);
        let out = img.resize(23, 6, ExecPolicy::Sequential).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn host_and_tensor_resize_agree() {
        let img = gradient_image(16, 20);
        let host = img.resize(9, 31, ExecPolicy::Parallel).unwrap();
        let t = img.to_tensor(&Device::Cpu, DType::F64).unwrap();
        let dev = ImageTensor::from_tensor(&resize_tensor(&t, 9, 31).unwrap()).unwrap();
        for (a, b) in host.data().iter().zip(dev.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn policies_match_bitwise() {
        let img = gradient_image(33, 17);
        let a = img.resize(50, 40, ExecPolicy::Sequential).unwrap();
        let b = img.resize(50, 40, ExecPolicy::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = gradient_image(5, 8);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().get(1, 2, 0), img.get(1, 2, 7));
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = gradient_image(6, 7);
        img.save(&p).unwrap();
        let back = ImageTensor::load(&p).unwrap();
        assert_eq!((back.height(), back.width()), (6, 7));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
