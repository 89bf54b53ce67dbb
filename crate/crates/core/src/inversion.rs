//! Feature inversion with a deep-image-prior reconstructor.
//!
//! A U-Net fed a fixed noise image `z` is optimized so that the backbone
//! features of its output match a captured target:
//! `argmin_θ ‖φ(F_θ(z)) − φ(I)‖_F`.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecPolicy};
use crate::generator::{init_generator, GeneratorConfig, Mode};
use crate::image::ImageTensor;
use crate::optim::{Adam, AdamConfig};
use crate::vit::Backbone;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Facet {
    Cls,
    Keys,
}

impl Facet {
    pub const VALID: [&'static str; 2] = ["cls", "keys"];
}

impl fmt::Display for Facet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Facet::Cls => "cls",
            Facet::Keys => "keys",
        })
    }
}

impl FromStr for Facet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Facet::Cls),
            "keys" => Ok(Facet::Keys),
            other => Err(Error::InvalidArgument(format!(
                "unknown facet `{other}`; valid facets: {}",
                Facet::VALID.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetProvenance {
    pub image_hash: String,
    pub image_size: (usize, usize),
    pub facet: Facet,
    pub layer: usize,
    pub feature_size: usize,
    pub backbone_checksum: String,
}

/// Detached feature values captured from a source image.
#[derive(Debug, Clone)]
pub struct InversionTarget {
    pub facet: Facet,
    pub layer: usize,
    /// `(d)` for [`Facet::Cls`], `(n+1, d)` for [`Facet::Keys`].
    pub values: Tensor,
    pub provenance: TargetProvenance,
}

fn facet_values(backbone: &Backbone, x: &Tensor, facet: Facet, layer: usize, size: usize) -> Result<Tensor> {
    let f = backbone.forward_features(&backbone.preprocess_tensor(x, size)?, &[layer])?;
    Ok(match facet {
        Facet::Cls => f.cls(layer)?.squeeze(0)?,
        Facet::Keys => f.keys(layer)?.squeeze(0)?,
    })
}

/// Captures `facet` at `layer` from `image` processed at `feature_size`.
pub fn capture_target(
    backbone: &Backbone,
    image: &ImageTensor,
    facet: Facet,
    layer: usize,
    feature_size: usize,
) -> Result<InversionTarget> {
    if layer == 0 || layer > backbone.num_layers() {
        return Err(Error::LayerOutOfRange {
            layer,
            max: backbone.num_layers(),
        });
    }
    let x = image.to_tensor(backbone.device(), backbone.dtype())?;
    let values = facet_values(backbone, &x, facet, layer, feature_size)?.detach();
    Ok(InversionTarget {
        facet,
        layer,
        values,
        provenance: TargetProvenance {
            image_hash: image.content_hash(),
            image_size: (image.height(), image.width()),
            facet,
            layer,
            feature_size,
            backbone_checksum: backbone.checksum().to_string(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InversionMode {
    /// Optimize the weights of a U-Net fed fixed noise.
    Prior,
    /// Optimize pixels directly (through a sigmoid); a baseline.
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Seeds both the noise input and the reconstructor initialization.
    pub noise_seed: u64,
    /// `(height, width)` of the reconstruction.
    pub output_size: (usize, usize),
    pub feature_size: usize,
    /// Abort when the distance exceeds this multiple of the best so far.
    pub divergence_factor: f64,
    pub mode: InversionMode,
    pub reconstructor: GeneratorConfig,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            learning_rate: 1e-3,
            noise_seed: 0,
            output_size: (224, 224),
            feature_size: 224,
            divergence_factor: 10.0,
            mode: InversionMode::Prior,
            reconstructor: GeneratorConfig::default(),
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("inversion iterations must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("inversion learning rate must be positive".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence_factor must exceed 1".into()));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::Config("output_size must be positive".into()));
        }
        self.reconstructor.validate()
    }
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    /// Reconstruction at the lowest observed distance.
    pub image: ImageTensor,
    /// Distance before each update; entry 0 is the initial distance.
    pub curve: Vec<f64>,
    pub best_distance: f64,
    pub best_iteration: usize,
}

impl InversionResult {
    pub fn initial_distance(&self) -> f64 {
        self.curve[0]
    }

    /// Running minimum of the curve.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.curve
            .iter()
            .scan(f64::INFINITY, |m, &d| {
                *m = m.min(d);
                Some(*m)
            })
            .collect()
    }

    /// Writes `result.png`, `distance_curve.log` and `target.json`.
    pub fn write(&self, dir: impl AsRef<Path>, target: &InversionTarget, config: &InversionConfig) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.image.save(dir.join("result.png"))?;
        let curve: String = self
            .curve
            .iter()
            .enumerate()
            .map(|(i, d)| format!("{i}\t{d:.9e}\n"))
            .collect();
        let p = dir.join("distance_curve.log");
        fs::write(&p, curve).map_err(|e| Error::io(p, e))?;
        #[derive(Serialize)]
        struct Manifest<'a> {
            target: &'a TargetProvenance,
            config: &'a InversionConfig,
            best_distance: f64,
            best_iteration: usize,
            initial_distance: f64,
        }
        let m = Manifest {
            target: &target.provenance,
            config,
            best_distance: self.best_distance,
            best_iteration: self.best_iteration,
            initial_distance: self.initial_distance(),
        };
        let p = dir.join("target.json");
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    }
}

/// Fixed uniform noise input `z ∈ [0, 1)^{3×h×w}`.
pub fn noise_input(seed: u64, height: usize, width: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..3 * height * width).map(|_| rng.random::<f32>()).collect();
    ImageTensor::new(height, width, data).expect("uniform samples lie in [0, 1)")
}

/// Frobenius distance between the target and the features of `x`.
pub fn feature_distance(backbone: &Backbone, target: &InversionTarget, x: &Tensor) -> Result<Tensor> {
    let v = facet_values(backbone, x, target.facet, target.layer, target.provenance.feature_size)?;
    if v.dims() != target.values.dims() {
        return Err(Error::Shape(format!(
            "features {:?} do not match target {:?}; use the target's image aspect",
            v.dims(),
            target.values.dims()
        )));
    }
    Ok((v - &target.values)?.sqr()?.sum_all()?.sqrt()?)
}

/// Host-image convenience for [`feature_distance`].
pub fn image_distance(backbone: &Backbone, target: &InversionTarget, image: &ImageTensor) -> Result<f64> {
    let x = image.to_tensor(backbone.device(), backbone.dtype())?;
    Ok(feature_distance(backbone, target, &x)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?)
}

/// Runs the inversion, calling `observe(iteration, distance)` before every update.
pub fn invert_with(
    backbone: &Backbone,
    target: &InversionTarget,
    config: &InversionConfig,
    mut observe: impl FnMut(usize, f64),
) -> Result<InversionResult> {
    config.validate()?;
    let (device, dtype) = (backbone.device(), backbone.dtype());
    let (h, w) = config.output_size;
    let z = noise_input(config.noise_seed, h, w).to_tensor(device, dtype)?;
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..Default::default()
    };

    enum Reconstructor {
        Prior(crate::generator::GeneratorState),
        Pixel(Var),
    }
    let mut recon = match config.mode {
        InversionMode::Prior => {
            let cfg = GeneratorConfig {
                seed: config.noise_seed,
                ..config.reconstructor.clone()
            };
            let mut g = init_generator(&cfg, device, dtype)?;
            g.set_mode(Mode::Train);
            Reconstructor::Prior(g)
        }
        // Logits of the noise, so the starting image is z itself.
        InversionMode::Pixel => {
            let logits = (z.clamp(1e-3, 1.0 - 1e-3)?.log()? - (z.affine(-1.0, 1.0)?.clamp(1e-3, 1.0)?).log()?)?;
            Reconstructor::Pixel(Var::from_tensor(&logits)?)
        }
    };
    let mut opt = match &recon {
        Reconstructor::Prior(g) => Adam::new(g.vars(), adam)?,
        Reconstructor::Pixel(v) => Adam::new([("pixels", v)], adam)?,
    };

    let mut curve = Vec::with_capacity(config.iterations + 1);
    let mut best = f64::INFINITY;
    let mut best_iteration = 0;
    let mut best_image: Option<ImageTensor> = None;
    for it in 0..=config.iterations {
        let out = match &mut recon {
            Reconstructor::Prior(g) => g.forward(&z)?,
            Reconstructor::Pixel(v) => ((v.as_tensor() * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?,
        };
        let dist = feature_distance(backbone, target, &out)?;
        let d = dist.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !d.is_finite() {
            return Err(Error::NonFinite {
                component: "feature distance".into(),
                iteration: it,
                diagnostic: None,
            });
        }
        observe(it, d);
        curve.push(d);
        if d < best {
            best = d;
            best_iteration = it;
            best_image = Some(ImageTensor::from_tensor(&out.detach())?);
        } else if best > 0.0 && d > config.divergence_factor * best {
            return Err(Error::Diverged {
                iteration: it,
                distance: d,
                best,
                factor: config.divergence_factor,
            });
        }
        // The last entry only measures the final weights.
        if it == config.iterations {
            break;
        }
        let grads = dist.backward()?;
        opt.step(&grads)?;
    }
    Ok(InversionResult {
        image: best_image.expect("at least one distance is recorded"),
        curve,
        best_distance: best,
        best_iteration,
    })
}

pub fn invert(backbone: &Backbone, target: &InversionTarget, config: &InversionConfig) -> Result<InversionResult> {
    invert_with(backbone, target, config, |_, _| {})
}

/// Inverts the [CLS] token of `image` at each of `layers`; duplicates run independently.
pub fn invert_cls_across_layers(
    backbone: &Backbone,
    image: &ImageTensor,
    layers: &[usize],
    config: &InversionConfig,
    policy: ExecPolicy,
) -> Result<Vec<InversionResult>> {
    let targets = layers
        .iter()
        .map(|&l| capture_target(backbone, image, Facet::Cls, l, config.feature_size))
        .collect::<Result<Vec<_>>>()?;
    exec::try_map_indexed(policy, targets.len(), |i| invert(backbone, &targets[i], config))
}
