//! Frozen ViT feature extractor.
//!
//! Implements the pre-norm transformer recurrence
//!
//! ```text
//! T̂ˡ = MSA(LN(Tˡ⁻¹)) + Tˡ⁻¹
//! Tˡ = MLP(LN(T̂ˡ)) + T̂ˡ
//! ```
//!
//! and exposes the tokens, queries, keys, values and attention of any block.
//! Parameters are plain tensors, never variables, so gradients only flow to
//! the image input.
//!
//! Archive tensor names follow the DINO/timm layout:
//!
//! | name | shape |
//! |------|-------|
//! | `cls_token` | `1 × 1 × d` |
//! | `pos_embed` | `1 × (g²+1) × d` |
//! | `patch_embed.proj.weight` / `.bias` | `d × 3 × p × p` / `d` |
//! | `blocks.{i}.norm1.weight` / `.bias` | `d` |
//! | `blocks.{i}.attn.qkv.weight` / `.bias` | `3d × d` / `3d` |
//! | `blocks.{i}.attn.proj.weight` / `.bias` | `d × d` / `d` |
//! | `blocks.{i}.norm2.weight` / `.bias` | `d` |
//! | `blocks.{i}.mlp.fc1.weight` / `.bias` | `h × d` / `h` |
//! | `blocks.{i}.mlp.fc2.weight` / `.bias` | `d × h` / `d` |
//! | `norm.weight` / `.bias` | `d` |

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::archive::{self, meta, ArchiveTensor, WeightArchive};
use crate::error::{Error, Result};
use crate::image::{bicubic_matrix_tensor, resize_tensor, ImageTensor};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub layer_norm_eps: f64,
    pub image_mean: [f32; 3],
    pub image_std: [f32; 3],
    /// Side of the square patch grid the position embeddings were trained at.
    pub native_grid: usize,
    /// Bicubically resample position embeddings for other grid sizes.
    pub interpolate_pos: bool,
}

impl BackboneConfig {
    /// Reads the configuration stored in an archive's metadata; the native grid
    /// comes from the `pos_embed` shape.
    pub fn from_archive(archive: &WeightArchive) -> Result<Self> {
        let pos = archive
            .get("pos_embed")
            .ok_or_else(|| Error::MissingParameter("pos_embed".into()))?;
        let tokens = *pos.shape.get(1).ok_or_else(|| Error::ShapeMismatch {
            path: "pos_embed".into(),
            expected: vec![1, 0, 0],
            actual: pos.shape.clone(),
        })?;
        let grid = ((tokens.saturating_sub(1)) as f64).sqrt().round() as usize;
        if grid * grid + 1 != tokens {
            return Err(Error::Archive(format!(
                "pos_embed has {tokens} tokens, not a square grid plus [CLS]"
            )));
        }
        let triple = |key: &str| -> Result<[f32; 3]> {
            let v = archive.meta_floats(key)?;
            v.try_into()
                .map_err(|_| Error::Archive(format!("metadata `{key}` must hold 3 values")))
        };
        let cfg = Self {
            patch_size: archive.meta_parsed(meta::PATCH_SIZE)?,
            num_layers: archive.meta_parsed(meta::NUM_LAYERS)?,
            embed_dim: archive.meta_parsed(meta::EMBED_DIM)?,
            num_heads: archive.meta_parsed(meta::NUM_HEADS)?,
            mlp_hidden: archive.meta_parsed(meta::MLP_HIDDEN)?,
            layer_norm_eps: archive.meta_parsed(meta::LAYER_NORM_EPS)?,
            image_mean: triple(meta::IMAGE_MEAN)?,
            image_std: triple(meta::IMAGE_STD)?,
            native_grid: grid,
            interpolate_pos: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.num_layers == 0 || self.embed_dim == 0 {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.image_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("image_std must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Every tensor name with its expected shape.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h, p) = (self.embed_dim, self.mlp_hidden, self.patch_size);
        let mut v = vec![
            ("cls_token".to_string(), vec![1, 1, d]),
            (
                "pos_embed".to_string(),
                vec![1, self.native_grid * self.native_grid + 1, d],
            ),
            ("patch_embed.proj.weight".to_string(), vec![d, 3, p, p]),
            ("patch_embed.proj.bias".to_string(), vec![d]),
        ];
        for i in 0..self.num_layers {
            let b = |s: &str| format!("blocks.{i}.{s}");
            v.extend([
                (b("norm1.weight"), vec![d]),
                (b("norm1.bias"), vec![d]),
                (b("attn.qkv.weight"), vec![3 * d, d]),
                (b("attn.qkv.bias"), vec![3 * d]),
                (b("attn.proj.weight"), vec![d, d]),
                (b("attn.proj.bias"), vec![d]),
                (b("norm2.weight"), vec![d]),
                (b("norm2.bias"), vec![d]),
                (b("mlp.fc1.weight"), vec![h, d]),
                (b("mlp.fc1.bias"), vec![h]),
                (b("mlp.fc2.weight"), vec![d, h]),
                (b("mlp.fc2.bias"), vec![d]),
            ]);
        }
        v.push(("norm.weight".to_string(), vec![d]));
        v.push(("norm.bias".to_string(), vec![d]));
        v
    }

    pub fn write_metadata(&self, archive: &mut WeightArchive) {
        let triple = |t: [f32; 3]| format!("{},{},{}", t[0], t[1], t[2]);
        archive.set_meta(meta::FORMAT, meta::BACKBONE_FORMAT);
        archive.set_meta(meta::PATCH_SIZE, self.patch_size.to_string());
        archive.set_meta(meta::NUM_LAYERS, self.num_layers.to_string());
        archive.set_meta(meta::EMBED_DIM, self.embed_dim.to_string());
        archive.set_meta(meta::NUM_HEADS, self.num_heads.to_string());
        archive.set_meta(meta::MLP_HIDDEN, self.mlp_hidden.to_string());
        archive.set_meta(meta::LAYER_NORM_EPS, format!("{:e}", self.layer_norm_eps));
        archive.set_meta(meta::IMAGE_MEAN, triple(self.image_mean));
        archive.set_meta(meta::IMAGE_STD, triple(self.image_std));
    }
}

/// Shape description for generating a randomly initialized backbone archive.
///
/// Used for tests, benchmarks and offline demos where no pretrained checkpoint
/// is available.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBackbone {
    pub patch_size: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub native_grid: usize,
    pub seed: u64,
}

impl SyntheticBackbone {
    /// ViT-B/8 geometry at 224 px.
    pub fn vit_b8(seed: u64) -> Self {
        Self {
            patch_size: 8,
            num_layers: 12,
            embed_dim: 768,
            num_heads: 12,
            mlp_hidden: 3072,
            native_grid: 28,
            seed,
        }
    }

    /// Twelve blocks at patch 8 with a narrow embedding; cheap enough for CPU training runs.
    pub fn desk(seed: u64) -> Self {
        Self {
            patch_size: 8,
            num_layers: 12,
            embed_dim: 48,
            num_heads: 4,
            mlp_hidden: 192,
            native_grid: 28,
            seed,
        }
    }

    pub fn config(&self) -> BackboneConfig {
        BackboneConfig {
            patch_size: self.patch_size,
            num_layers: self.num_layers,
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            mlp_hidden: self.mlp_hidden,
            layer_norm_eps: 1e-6,
            image_mean: IMAGENET_MEAN,
            image_std: IMAGENET_STD,
            native_grid: self.native_grid,
            interpolate_pos: true,
        }
    }

    pub fn build(&self) -> WeightArchive {
        let cfg = self.config();
        let (d, h, p) = (cfg.embed_dim as f64, cfg.mlp_hidden as f64, cfg.patch_size as f64);
        let mut archive = WeightArchive::new();
        for (name, shape) in cfg.parameter_shapes() {
            let leaf = name.rsplit('.').next().unwrap_or(&name);
            let is_norm = name.contains("norm");
            let (std, offset) = match (name.as_str(), leaf) {
                ("cls_token", _) => (0.5, 0.0),
                ("pos_embed", _) => (0.1, 0.0),
                ("patch_embed.proj.weight", _) => (1.0 / (3.0 * p * p).sqrt(), 0.0),
                (_, "weight") if is_norm => (0.1, 1.0),
                (_, "bias") if is_norm => (0.05, 0.0),
                (n, "weight") if n.ends_with("qkv.weight") => (1.0 / d.sqrt(), 0.0),
                (n, "weight") if n.ends_with("proj.weight") => (0.5 / d.sqrt(), 0.0),
                (n, "weight") if n.ends_with("fc1.weight") => (1.0 / d.sqrt(), 0.0),
                (n, "weight") if n.ends_with("fc2.weight") => (0.5 / h.sqrt(), 0.0),
                _ => (0.02, 0.0),
            };
            archive.insert(
                name.clone(),
                archive::synthetic_tensor(self.seed, &name, &shape, std, offset),
            );
        }
        cfg.write_metadata(&mut archive);
        archive.set_meta(meta::SOURCE, format!("synthetic seed={}", self.seed));
        archive
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1_w: Tensor,
    norm1_b: Tensor,
    qkv_wt: Tensor,
    qkv_b: Tensor,
    proj_wt: Tensor,
    proj_b: Tensor,
    norm2_w: Tensor,
    norm2_b: Tensor,
    fc1_wt: Tensor,
    fc1_b: Tensor,
    fc2_wt: Tensor,
    fc2_b: Tensor,
}

/// Immutable pretrained backbone. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    device: Device,
    dtype: DType,
    cls_token: Tensor,
    pos_embed: Tensor,
    patch_w: Tensor,
    patch_b: Tensor,
    blocks: Vec<Block>,
    norm_w: Tensor,
    norm_b: Tensor,
    mean: Tensor,
    std: Tensor,
    params: Vec<(String, Tensor)>,
    checksum: String,
}

/// Captured per-layer features; every tensor carries a leading batch axis.
#[derive(Debug, Clone)]
pub struct LayerFeatures {
    /// `(B, n+1, d)` block output; row 0 is [CLS].
    pub tokens: Tensor,
    /// `(B, n+1, d)` projections of the normalized block input, heads concatenated.
    pub queries: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
    /// `(B, heads, n+1, n+1)` row-stochastic attention.
    pub attention: Tensor,
}

#[derive(Debug, Clone)]
pub struct Features {
    pub grid: (usize, usize),
    pub layers: BTreeMap<usize, LayerFeatures>,
}

impl Features {
    pub fn layer(&self, layer: usize) -> Result<&LayerFeatures> {
        self.layers.get(&layer).ok_or(Error::LayerNotCaptured(layer))
    }

    /// `(B, d)` [CLS] token of a captured layer.
    pub fn cls(&self, layer: usize) -> Result<Tensor> {
        Ok(self.layer(layer)?.tokens.narrow(1, 0, 1)?.squeeze(1)?)
    }

    /// `(B, n+1, d)` keys of a captured layer.
    pub fn keys(&self, layer: usize) -> Result<Tensor> {
        Ok(self.layer(layer)?.keys.clone())
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1 + 1
    }
}

/// Row 0 of the layer's token sequence, for a single-image capture.
pub fn extract_cls(features: &Features, layer: usize) -> Result<Tensor> {
    Ok(features.cls(layer)?.squeeze(0)?)
}

/// `(n+1, d)` keys of a single-image capture.
pub fn extract_keys(features: &Features, layer: usize) -> Result<Tensor> {
    Ok(features.keys(layer)?.squeeze(0)?)
}

fn take(
    archive: &WeightArchive,
    name: &str,
    shape: &[usize],
    device: &Device,
    dtype: DType,
) -> Result<Tensor> {
    let t: &ArchiveTensor = archive
        .get(name)
        .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
    if t.shape != shape {
        return Err(Error::ShapeMismatch {
            path: name.to_string(),
            expected: shape.to_vec(),
            actual: t.shape.clone(),
        });
    }
    t.to_tensor(device, dtype)
}

impl Backbone {
    /// Loads using the configuration recorded in the archive.
    pub fn from_archive(archive: &WeightArchive, device: &Device, dtype: DType) -> Result<Self> {
        let config = BackboneConfig::from_archive(archive)?;
        Self::load(archive, config, device, dtype)
    }

    pub fn load(
        archive: &WeightArchive,
        config: BackboneConfig,
        device: &Device,
        dtype: DType,
    ) -> Result<Self> {
        config.validate()?;
        let shapes: BTreeMap<String, Vec<usize>> = config.parameter_shapes().into_iter().collect();
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in &shapes {
            params.push((name.clone(), take(archive, name, shape, device, dtype)?));
        }
        let get = |name: &str| -> Tensor {
            params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .expect("validated above")
        };
        let linear_t = |name: &str| -> Result<Tensor> { Ok(get(name).t()?.contiguous()?) };
        let mut blocks = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let b = |s: &str| format!("blocks.{i}.{s}");
            blocks.push(Block {
                norm1_w: get(&b("norm1.weight")),
                norm1_b: get(&b("norm1.bias")),
                qkv_wt: linear_t(&b("attn.qkv.weight"))?,
                qkv_b: get(&b("attn.qkv.bias")),
                proj_wt: linear_t(&b("attn.proj.weight"))?,
                proj_b: get(&b("attn.proj.bias")),
                norm2_w: get(&b("norm2.weight")),
                norm2_b: get(&b("norm2.bias")),
                fc1_wt: linear_t(&b("mlp.fc1.weight"))?,
                fc1_b: get(&b("mlp.fc1.bias")),
                fc2_wt: linear_t(&b("mlp.fc2.weight"))?,
                fc2_b: get(&b("mlp.fc2.bias")),
            });
        }
        let mean = Tensor::from_slice(&config.image_mean, (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        let std = Tensor::from_slice(&config.image_std, (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        let checksum = params_checksum(&params)?;
        Ok(Self {
            cls_token: get("cls_token"),
            pos_embed: get("pos_embed"),
            patch_w: get("patch_embed.proj.weight"),
            patch_b: get("patch_embed.proj.bias"),
            norm_w: get("norm.weight"),
            norm_b: get("norm.bias"),
            blocks,
            mean,
            std,
            params,
            checksum,
            config,
            device: device.clone(),
            dtype,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Checksum recorded when the parameters were loaded.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Recomputes the parameter checksum from the live tensors.
    pub fn current_checksum(&self) -> Result<String> {
        params_checksum(&self.params)
    }

    /// Output height and width of [`Backbone::preprocess`] for an `height × width` input.
    ///
    /// The larger side is resized to `target` (aspect preserved), then each side is
    /// center-cropped down to a multiple of the patch size.
    pub fn processed_size(&self, height: usize, width: usize, target: usize) -> Result<(usize, usize)> {
        let p = self.config.patch_size;
        if target <= p {
            return Err(Error::InvalidArgument(format!(
                "target size {target} must exceed the patch size {p}"
            )));
        }
        if height < p || width < p {
            return Err(Error::ImageTooSmall { height, width, min: p });
        }
        let (rh, rw) = resized_dims(height, width, target);
        let (ch, cw) = (rh / p * p, rw / p * p);
        if ch == 0 || cw == 0 {
            return Err(Error::ImageTooSmall { height, width, min: p });
        }
        Ok((ch, cw))
    }

    /// Resize, center-crop and normalize a `(B, 3, H, W)` batch with values in `[0, 1]`.
    /// Differentiable with respect to `x`.
    pub fn preprocess_tensor(&self, x: &Tensor, target: usize) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let (ch, cw) = self.processed_size(h, w, target)?;
        let (rh, rw) = resized_dims(h, w, target);
        let x = resize_tensor(x, rh, rw)?;
        let x = x.narrow(2, (rh - ch) / 2, ch)?.narrow(3, (rw - cw) / 2, cw)?;
        Ok(x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?)
    }

    pub fn preprocess(&self, image: &ImageTensor, target: usize) -> Result<Tensor> {
        let x = image.to_tensor(&self.device, self.dtype)?;
        self.preprocess_tensor(&x, target)
    }

    fn position_embedding(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let g0 = self.config.native_grid;
        let d = self.config.embed_dim;
        let cls_pos = self.pos_embed.narrow(1, 0, 1)?;
        let patch_pos = self.pos_embed.narrow(1, 1, g0 * g0)?;
        if (gh, gw) == (g0, g0) {
            return Ok(self.pos_embed.clone());
        }
        if !self.config.interpolate_pos {
            return Err(Error::InvalidArgument(format!(
                "grid {gh}x{gw} differs from native {g0}x{g0} and interpolation is disabled"
            )));
        }
        let rh = bicubic_matrix_tensor(g0, gh, &self.device, self.dtype)?;
        let rwt = bicubic_matrix_tensor(g0, gw, &self.device, self.dtype)?.t()?;
        let p = patch_pos.reshape((g0, g0 * d))?;
        let p = rh.matmul(&p)?.reshape((gh, g0, d))?.transpose(1, 2)?;
        let p = p.broadcast_matmul(&rwt)?.transpose(1, 2)?.reshape((1, gh * gw, d))?;
        Ok(Tensor::cat(&[&cls_pos, &p], 1)?)
    }

    fn embed(&self, x: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let (b, _, h, w) = x.dims4()?;
        let p = self.config.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!(
                "processed size {h}x{w} is not a multiple of patch size {p}"
            )));
        }
        let d = self.config.embed_dim;
        let patches = x
            .conv2d(&self.patch_w, 0, p, 1, 1)?
            .broadcast_add(&self.patch_b.reshape((1, d, 1, 1))?)?;
        let (gh, gw) = (h / p, w / p);
        let patches = patches.flatten_from(2)?.transpose(1, 2)?;
        let cls = self.cls_token.broadcast_as((b, 1, d))?;
        let tokens = Tensor::cat(&[&cls, &patches], 1)?;
        let tokens = tokens.broadcast_add(&self.position_embedding(gh, gw)?)?;
        Ok((tokens, (gh, gw)))
    }

    /// Runs the blocks up to the deepest requested layer and captures the requested ones.
    ///
    /// `x` must be a preprocessed `(B, 3, h, w)` batch.
    pub fn forward_features(&self, x: &Tensor, layers: &[usize]) -> Result<Features> {
        let wanted: BTreeSet<usize> = layers.iter().copied().collect();
        for &l in &wanted {
            if l == 0 || l > self.config.num_layers {
                return Err(Error::LayerOutOfRange {
                    layer: l,
                    max: self.config.num_layers,
                });
            }
        }
        let (mut t, grid) = self.embed(x)?;
        let mut captured = BTreeMap::new();
        let last = wanted.iter().next_back().copied().unwrap_or(0);
        for (i, block) in self.blocks.iter().enumerate().take(last) {
            let layer = i + 1;
            let (next, feats) = self.block_forward(block, &t)?;
            if wanted.contains(&layer) {
                captured.insert(layer, feats);
            }
            t = next;
        }
        Ok(Features {
            grid,
            layers: captured,
        })
    }

    /// Convenience: preprocess a host image and capture features.
    pub fn image_features(&self, image: &ImageTensor, target: usize, layers: &[usize]) -> Result<Features> {
        let x = self.preprocess(image, target)?;
        self.forward_features(&x, layers)
    }

    /// [CLS] after the model's final normalization layer.
    pub fn normalized_cls(&self, features: &Features, layer: usize) -> Result<Tensor> {
        layer_norm(&features.cls(layer)?, &self.norm_w, &self.norm_b, self.config.layer_norm_eps)
    }

    fn block_forward(&self, blk: &Block, t: &Tensor) -> Result<(Tensor, LayerFeatures)> {
        let (b, n, d) = t.dims3()?;
        let heads = self.config.num_heads;
        let hd = self.config.head_dim();
        let eps = self.config.layer_norm_eps;

        let h = layer_norm(t, &blk.norm1_w, &blk.norm1_b, eps)?;
        let qkv = linear(&h, &blk.qkv_wt, &blk.qkv_b)?;
        let q = qkv.narrow(2, 0, d)?;
        let k = qkv.narrow(2, d, d)?;
        let v = qkv.narrow(2, 2 * d, d)?;
        let split = |x: &Tensor| -> Result<Tensor> {
            Ok(x.reshape((b, n, heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let (qh, kh, vh) = (split(&q)?, split(&k)?, split(&v)?);
        let scale = 1.0 / (hd as f64).sqrt();
        let logits = (qh.matmul(&kh.t()?)? * scale)?;
        let attn = softmax_last_dim(&logits)?;
        let ctx = attn.matmul(&vh)?.transpose(1, 2)?.reshape((b, n, d))?;
        let t_hat = (t + linear(&ctx, &blk.proj_wt, &blk.proj_b)?)?;

        let h2 = layer_norm(&t_hat, &blk.norm2_w, &blk.norm2_b, eps)?;
        let mlp = linear(&linear(&h2, &blk.fc1_wt, &blk.fc1_b)?.gelu_erf()?, &blk.fc2_wt, &blk.fc2_b)?;
        let out = (t_hat + mlp)?;
        Ok((
            out.clone(),
            LayerFeatures {
                tokens: out,
                queries: q,
                keys: k,
                values: v,
                attention: attn,
            },
        ))
    }
}

fn resized_dims(height: usize, width: usize, target: usize) -> (usize, usize) {
    let larger = height.max(width);
    if larger == target {
        return (height, width);
    }
    let scale = target as f64 / larger as f64;
    let r = |s: usize| ((s as f64 * scale).round() as usize).max(1);
    if height >= width {
        (target, r(width))
    } else {
        (r(height), target)
    }
}

fn params_checksum(params: &[(String, Tensor)]) -> Result<String> {
    let host = params
        .iter()
        .map(|(n, t)| {
            let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            Ok((n.clone(), t.dims().to_vec(), data))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(archive::checksum_entries(
        host.iter().map(|(n, s, d)| (n.as_str(), s.as_slice(), d.as_slice())),
    ))
}

fn linear(x: &Tensor, wt: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_matmul(wt)?.broadcast_add(b)?)
}

pub(crate) fn layer_norm(x: &Tensor, w: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(xn.broadcast_mul(w)?.broadcast_add(b)?)
}

pub(crate) fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticBackbone {
        SyntheticBackbone {
            patch_size: 8,
            num_layers: 3,
            embed_dim: 16,
            num_heads: 2,
            mlp_hidden: 32,
            native_grid: 4,
            seed: 3,
        }
    }

    fn load_tiny() -> Backbone {
        Backbone::from_archive(&tiny().build(), &Device::Cpu, DType::F32).unwrap()
    }

    fn test_image(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, |c, y, x| {
            0.5 + 0.4 * ((y as f32 * 0.37 + c as f32).sin() * (x as f32 * 0.21).cos())
        })
    }

    #[test]
    fn config_round_trips_through_metadata() {
        let s = tiny();
        let cfg = BackboneConfig::from_archive(&s.build()).unwrap();
        assert_eq!(cfg, s.config());
    }

    #[test]
    fn missing_projection_is_named() {
        let mut a = tiny().build();
        a.remove("blocks.1.attn.qkv.weight");
        match Backbone::from_archive(&a, &Device::Cpu, DType::F32) {
            Err(Error::MissingParameter(p)) => assert_eq!(p, "blocks.1.attn.qkv.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_width_is_a_shape_error() {
        let mut a = tiny().build();
        a.insert(
            "blocks.2.norm2.weight",
            ArchiveTensor::new(vec![24], vec![1.0; 24]).unwrap(),
        );
        match Backbone::from_archive(&a, &Device::Cpu, DType::F32) {
            Err(Error::ShapeMismatch { path, expected, actual }) => {
                assert_eq!(path, "blocks.2.norm2.weight");
                assert_eq!(expected, vec![16]);
                assert_eq!(actual, vec![24]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = tiny().config();
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn processed_sizes() {
        let bb = load_tiny();
        assert_eq!(bb.processed_size(512, 512, 224).unwrap(), (224, 224));
        assert_eq!(bb.processed_size(224, 224, 224).unwrap(), (224, 224));
        // 200 rows x 300 cols: width -> 224, height -> round(149.33) = 149 -> crop 144.
        assert_eq!(bb.processed_size(200, 300, 224).unwrap(), (144, 224));
        assert_eq!(bb.processed_size(300, 200, 224).unwrap(), (224, 144));
        assert!(matches!(
            bb.processed_size(4, 100, 224),
            Err(Error::ImageTooSmall { .. })
        ));
        assert!(bb.processed_size(64, 64, 8).is_err());
    }

    #[test]
    fn identity_geometry_only_normalizes() {
        let bb = load_tiny();
        let img = test_image(32, 32);
        let x = bb.preprocess(&img, 32).unwrap();
        let v: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        for c in 0..3 {
            let expect = (img.get(c, 5, 7) - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            assert!((v[(c * 32 + 5) * 32 + 7] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn token_count_and_attention_rows() {
        let bb = load_tiny();
        let f = bb.image_features(&test_image(40, 24), 40, &[1, 3]).unwrap();
        assert_eq!(f.grid, (5, 3));
        let keys = extract_keys(&f, 3).unwrap();
        assert_eq!(keys.dims(), &[16, 16]);
        assert_eq!(extract_cls(&f, 1).unwrap().dims(), &[16]);
        let rows: Vec<f32> = f.layer(1).unwrap().attention.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(rows.iter().all(|s| (s - 1.0).abs() < 1e-5));
        assert!(matches!(f.cls(2), Err(Error::LayerNotCaptured(2))));
    }

    #[test]
    fn out_of_range_layer() {
        let bb = load_tiny();
        let x = bb.preprocess(&test_image(32, 32), 32).unwrap();
        assert!(matches!(
            bb.forward_features(&x, &[4]),
            Err(Error::LayerOutOfRange { layer: 4, max: 3 })
        ));
        assert!(bb.forward_features(&x, &[0]).is_err());
    }

    #[test]
    fn native_grid_position_embedding_passes_through() {
        let bb = load_tiny();
        let p = bb.position_embedding(4, 4).unwrap();
        let a: Vec<f32> = p.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = bb.pos_embed.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        assert_eq!(bb.position_embedding(3, 5).unwrap().dims(), &[1, 16, 16]);
    }

    #[test]
    fn deterministic_and_layer_dependent_cls() {
        let bb = load_tiny();
        let img = test_image(32, 32);
        let f1 = bb.image_features(&img, 32, &[1, 3]).unwrap();
        let f2 = bb.image_features(&img, 32, &[1, 3]).unwrap();
        let a: Vec<f32> = extract_cls(&f1, 3).unwrap().to_vec1().unwrap();
        let b: Vec<f32> = extract_cls(&f2, 3).unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        let c: Vec<f32> = extract_cls(&f1, 1).unwrap().to_vec1().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn checksum_is_stable() {
        let bb = load_tiny();
        assert_eq!(bb.checksum(), bb.current_checksum().unwrap());
    }
}
