//! U-Net image-to-image generator.
//!
//! Five encoder levels (`3×3` conv, batch norm, leaky ReLU; stride 2 from the
//! second level on), a `1×1` projection of every level concatenated into the
//! matching decoder level, nearest-neighbour upsampling in the decoder and a
//! final `1×1` convolution with a sigmoid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveTensor, WeightArchive};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const LEVELS: usize = 5;
const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Input channels followed by the output channels of each encoder level.
    pub encoder_channels: Vec<usize>,
    /// Output channels of each `1×1` skip projection.
    pub skip_channels: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Reflection-pad inputs whose sides are not multiples of 16, then crop back.
    pub reflect_pad: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![3, 16, 32, 64, 128, 128],
            skip_channels: 4,
            leaky_slope: 0.2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            reflect_pad: true,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.encoder_channels;
        if c.len() != LEVELS + 1 {
            return Err(Error::Config(format!(
                "generator needs {LEVELS} encoder levels ({} channel entries), got {}",
                LEVELS + 1,
                c.len().saturating_sub(1)
            )));
        }
        if c[0] != 3 {
            return Err(Error::Config("generator input must have 3 channels".into()));
        }
        if c.iter().any(|&x| x == 0) || self.skip_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config("leaky_slope must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::Config("invalid batch-norm momentum or eps".into()));
        }
        Ok(())
    }

    /// Output channels of decoder level `i` (1-based): the encoder order reversed.
    fn decoder_out(&self, level: usize) -> usize {
        self.encoder_channels[(level - 1).max(1)]
    }

    /// Every trainable parameter with its shape.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.encoder_channels;
        let s = self.skip_channels;
        let mut v = Vec::new();
        let bn = |v: &mut Vec<(String, Vec<usize>)>, p: &str, ch: usize| {
            v.push((format!("{p}.bn.weight"), vec![ch]));
            v.push((format!("{p}.bn.bias"), vec![ch]));
        };
        for i in 1..=LEVELS {
            v.push((format!("enc{i}.conv.weight"), vec![c[i], c[i - 1], 3, 3]));
            bn(&mut v, &format!("enc{i}"), c[i]);
            v.push((format!("skip{i}.conv.weight"), vec![s, c[i], 1, 1]));
            bn(&mut v, &format!("skip{i}"), s);
            let out = self.decoder_out(i);
            v.push((format!("dec{i}.conv.weight"), vec![out, c[i] + s, 3, 3]));
            bn(&mut v, &format!("dec{i}"), out);
        }
        v.push(("out.conv.weight".into(), vec![3, self.decoder_out(1), 1, 1]));
        v.push(("out.conv.bias".into(), vec![3]));
        v.sort();
        v
    }

    fn norm_layers(&self) -> Vec<(String, usize)> {
        let mut v = Vec::new();
        for i in 1..=LEVELS {
            v.push((format!("enc{i}"), self.encoder_channels[i]));
            v.push((format!("skip{i}"), self.skip_channels));
            v.push((format!("dec{i}"), self.decoder_out(i)));
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Batch statistics; running averages are updated.
    Train,
    /// Running averages; the state is not modified.
    Eval,
}

#[derive(Debug, Clone)]
pub struct GeneratorState {
    config: GeneratorConfig,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Tensor>,
    mode: Mode,
    skip_enabled: [bool; LEVELS],
    device: Device,
    dtype: DType,
}

/// Deterministic fan-in initialization: Kaiming-normal conv weights for the
/// configured leaky slope, unit/zero batch-norm affine, zero output bias.
pub fn init_generator(config: &GeneratorConfig, device: &Device, dtype: DType) -> Result<GeneratorState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gain = (2.0 / (1.0 + config.leaky_slope * config.leaky_slope)).sqrt();
    let mut params = BTreeMap::new();
    for (name, shape) in config.parameter_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = if name.ends_with("conv.weight") {
            let fan_in: usize = shape[1..].iter().product();
            let dist = Normal::new(0.0, gain / (fan_in as f64).sqrt())
                .map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
        } else if name.ends_with("bn.weight") {
            vec![1.0; n]
        } else {
            vec![0.0; n]
        };
        let t = Tensor::from_vec(data, shape.as_slice(), device)?.to_dtype(dtype)?;
        params.insert(name, Var::from_tensor(&t)?);
    }
    let mut buffers = BTreeMap::new();
    for (layer, ch) in config.norm_layers() {
        buffers.insert(format!("{layer}.bn.running_mean"), Tensor::zeros(ch, dtype, device)?);
        buffers.insert(format!("{layer}.bn.running_var"), Tensor::ones(ch, dtype, device)?);
    }
    Ok(GeneratorState {
        config: config.clone(),
        params,
        buffers,
        mode: Mode::Train,
        skip_enabled: [true; LEVELS],
        device: device.clone(),
        dtype,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    mode: Mode,
    generator: GeneratorConfig,
}

impl GeneratorState {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Ablation hook: a disabled skip contributes zeros to its decoder level.
    pub fn set_skip_enabled(&mut self, level: usize, enabled: bool) -> Result<()> {
        if !(1..=LEVELS).contains(&level) {
            return Err(Error::InvalidArgument(format!("skip level {level} not in 1..={LEVELS}")));
        }
        self.skip_enabled[level - 1] = enabled;
        Ok(())
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<(&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v)).collect()
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("generator parameter {name} exists by construction"))
            .as_tensor()
    }

    /// Forward pass in the current mode. In [`Mode::Train`] running statistics are updated.
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        match self.mode {
            Mode::Train => {
                let mut updates = Vec::new();
                let out = self.run(x, Some(&mut updates))?;
                for (name, value) in updates {
                    self.buffers.insert(name, value);
                }
                Ok(out)
            }
            Mode::Eval => self.run(x, None),
        }
    }

    /// Read-only forward using running statistics.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, None)
    }

    /// Runs an image through the generator in inference mode.
    pub fn generate(&self, image: &ImageTensor) -> Result<ImageTensor> {
        let x = image.to_tensor(&self.device, self.dtype)?;
        ImageTensor::from_tensor(&self.infer(&x)?.detach())
    }

    fn run(&self, x: &Tensor, mut stats: Option<&mut Vec<(String, Tensor)>>) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("generator expects 3 channels, got {c}")));
        }
        let m = 1usize << (LEVELS - 1);
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let padded = if (ph, pw) != (h, w) {
            if !self.config.reflect_pad {
                return Err(Error::InvalidArgument(format!(
                    "input {h}x{w} is not a multiple of {m} and padding is disabled"
                )));
            }
            reflect_pad(x, ph - h, pw - w)?
        } else {
            x.clone()
        };

        let mut enc = Vec::with_capacity(LEVELS);
        let mut cur = padded;
        for i in 1..=LEVELS {
            let stride = if i == 1 { 1 } else { 2 };
            cur = self.conv_block(&cur, &format!("enc{i}"), stride, 1, stats.as_deref_mut())?;
            enc.push(cur.clone());
        }
        let mut skips = Vec::with_capacity(LEVELS);
        for (i, e) in enc.iter().enumerate() {
            let s = self.conv_block(e, &format!("skip{}", i + 1), 1, 0, stats.as_deref_mut())?;
            skips.push(if self.skip_enabled[i] { s } else { s.zeros_like()? });
        }
        let mut up = enc[LEVELS - 1].clone();
        for i in (1..=LEVELS).rev() {
            if i < LEVELS {
                let (_, _, hh, ww) = up.dims4()?;
                up = up.upsample_nearest2d(hh * 2, ww * 2)?;
            }
            let joined = Tensor::cat(&[&up, &skips[i - 1]], 1)?;
            up = self.conv_block(&joined, &format!("dec{i}"), 1, 1, stats.as_deref_mut())?;
        }
        let logits = up
            .conv2d(self.p("out.conv.weight"), 0, 1, 1, 1)?
            .broadcast_add(&self.p("out.conv.bias").reshape((1, 3, 1, 1))?)?;
        let out = sigmoid(&logits)?;
        if (ph, pw) != (h, w) {
            Ok(out.narrow(2, 0, h)?.narrow(3, 0, w)?)
        } else {
            Ok(out)
        }
    }

    fn conv_block(
        &self,
        x: &Tensor,
        prefix: &str,
        stride: usize,
        padding: usize,
        stats: Option<&mut Vec<(String, Tensor)>>,
    ) -> Result<Tensor> {
        let y = x.conv2d(self.p(&format!("{prefix}.conv.weight")), padding, stride, 1, 1)?;
        let y = self.batch_norm(&y, prefix, stats)?;
        let slope = self.config.leaky_slope;
        Ok(y.maximum(&(&y * slope)?)?)
    }

    fn batch_norm(&self, x: &Tensor, prefix: &str, stats: Option<&mut Vec<(String, Tensor)>>) -> Result<Tensor> {
        let ch = x.dim(1)?;
        let shape = (1, ch, 1, 1);
        let eps = self.config.bn_eps;
        let rm_key = format!("{prefix}.bn.running_mean");
        let rv_key = format!("{prefix}.bn.running_var");
        let (mean, var) = match stats {
            Some(updates) => {
                let mean = x.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
                let xc = x.broadcast_sub(&mean)?;
                let var = xc.sqr()?.mean_keepdim(3)?.mean_keepdim(2)?.mean_keepdim(0)?;
                let count = x.elem_count() / ch;
                let unbiased = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                let mom = self.config.bn_momentum;
                let rm = &self.buffers[&rm_key];
                let rv = &self.buffers[&rv_key];
                let new_rm = ((rm * (1.0 - mom))? + (mean.detach().flatten_all()? * mom)?)?;
                let new_rv = ((rv * (1.0 - mom))? + (var.detach().flatten_all()? * (mom * unbiased))?)?;
                updates.push((rm_key, new_rm));
                updates.push((rv_key, new_rv));
                (mean, var)
            }
            None => (
                self.buffers[&rm_key].reshape(shape)?,
                self.buffers[&rv_key].reshape(shape)?,
            ),
        };
        let xn = x.broadcast_sub(&mean)?.broadcast_div(&(var + eps)?.sqrt()?)?;
        let g = self.p(&format!("{prefix}.bn.weight")).reshape(shape)?;
        let b = self.p(&format!("{prefix}.bn.bias")).reshape(shape)?;
        Ok(xn.broadcast_mul(&g)?.broadcast_add(&b)?)
    }

    /// Parameters and running statistics as an archive (values stored as `f32`).
    pub fn to_archive(&self) -> Result<WeightArchive> {
        let mut a = WeightArchive::new();
        for (k, v) in &self.params {
            a.insert(k.clone(), ArchiveTensor::from_tensor(v.as_tensor())?);
        }
        for (k, v) in &self.buffers {
            a.insert(k.clone(), ArchiveTensor::from_tensor(v)?);
        }
        a.set_meta("format", "vitsplice.generator.v1");
        Ok(a)
    }

    /// Rebuilds a state from an archive written by [`GeneratorState::to_archive`].
    pub fn from_archive(
        config: &GeneratorConfig,
        archive: &WeightArchive,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        let mut state = init_generator(config, device, dtype)?;
        let load = |name: &str, expected: &[usize]| -> Result<Tensor> {
            let t = archive
                .get(name)
                .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
            if t.shape != expected {
                return Err(Error::ShapeMismatch {
                    path: name.to_string(),
                    expected: expected.to_vec(),
                    actual: t.shape.clone(),
                });
            }
            t.to_tensor(device, dtype)
        };
        for (name, var) in &state.params {
            var.set(&load(name, var.dims())?)?;
        }
        for (name, buf) in state.buffers.iter_mut() {
            *buf = load(name, buf.dims())?;
        }
        Ok(state)
    }

    fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".toml");
        PathBuf::from(p)
    }

    /// Writes `path` (tensor archive) and `path.toml` (versioned config sidecar).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_archive()?.write(path)?;
        let sidecar = Sidecar {
            version: SIDECAR_VERSION,
            mode: self.mode,
            generator: self.config.clone(),
        };
        let text = toml::to_string(&sidecar).map_err(|e| Error::Config(e.to_string()))?;
        let sp = Self::sidecar_path(path);
        std::fs::write(&sp, text).map_err(|e| Error::io(sp, e))
    }

    pub fn load(path: impl AsRef<Path>, device: &Device, dtype: DType) -> Result<Self> {
        let path = path.as_ref();
        let sp = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let sidecar: Sidecar = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", sp.display())))?;
        if sidecar.version != SIDECAR_VERSION {
            return Err(Error::Config(format!(
                "unsupported generator sidecar version {}",
                sidecar.version
            )));
        }
        let archive = WeightArchive::read(path)?;
        let mut state = Self::from_archive(&sidecar.generator, &archive, device, dtype)?;
        state.mode = sidecar.mode;
        Ok(state)
    }
}

/// `σ(x) = (tanh(x/2) + 1) / 2`, which has a finite gradient everywhere.
fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Reflect-pads the bottom and right edges of a `(B, C, H, W)` tensor.
fn reflect_pad(x: &Tensor, bottom: usize, right: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if bottom >= h || right >= w {
        return Err(Error::InvalidArgument(format!(
            "input {h}x{w} is too small to reflect-pad by {bottom}x{right}"
        )));
    }
    let index = |n: usize, pad: usize| -> Result<Tensor> {
        let idx: Vec<u32> = (0..n + pad)
            .map(|i| if i < n { i } else { 2 * (n - 1) - i } as u32)
            .collect();
        Ok(Tensor::from_vec(idx, n + pad, x.device())?)
    };
    let mut out = x.clone();
    if bottom > 0 {
        out = out.index_select(&index(h, bottom)?, 2)?;
    }
    if right > 0 {
        out = out.index_select(&index(w, right)?, 3)?;
    }
    Ok(out)
}
