//! Raw feature and PCA dumps for external visualization.
//!
//! Every array is written as little-endian `f32` with its shape recorded in
//! `manifest.json`.

use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::Serialize;

use crate::descriptors::{key_self_similarity, selfsim_pca, PcaMap};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::vit::Backbone;

#[derive(Debug, Clone, Serialize)]
pub struct DumpEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct DumpManifest {
    pub image_hash: String,
    pub feature_size: usize,
    pub grid: (usize, usize),
    pub backbone_checksum: String,
    pub entries: Vec<DumpEntry>,
}

pub fn write_raw(path: &Path, t: &Tensor) -> Result<Vec<usize>> {
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(t.dims().to_vec())
}

/// Writes tokens, queries, keys, values and attention of each layer plus the key self-similarity.
pub fn dump_features(
    backbone: &Backbone,
    image: &ImageTensor,
    layers: &[usize],
    feature_size: usize,
    dir: impl AsRef<Path>,
) -> Result<DumpManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let f = backbone.image_features(image, feature_size, layers)?;
    let mut entries = Vec::new();
    for (layer, lf) in &f.layers {
        let keys = lf.keys.squeeze(0)?;
        let selfsim = key_self_similarity(&keys)?;
        for (name, t) in [
            ("tokens", lf.tokens.squeeze(0)?),
            ("queries", lf.queries.squeeze(0)?),
            ("keys", keys),
            ("values", lf.values.squeeze(0)?),
            ("attention", lf.attention.squeeze(0)?),
            ("selfsim", selfsim),
        ] {
            let file = format!("layer{layer:02}_{name}.f32");
            let shape = write_raw(&dir.join(&file), &t)?;
            entries.push(DumpEntry {
                file,
                shape,
                dtype: "f32le",
            });
        }
    }
    let manifest = DumpManifest {
        image_hash: image.content_hash(),
        feature_size,
        grid: f.grid,
        backbone_checksum: backbone.checksum().to_string(),
        entries,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

fn write_manifest(dir: &Path, m: &DumpManifest) -> Result<()> {
    let p = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&p, text).map_err(|e| Error::io(p, e))
}

/// Top-`k` PCA components of the deepest-layer key self-similarity.
pub fn keys_pca(backbone: &Backbone, image: &ImageTensor, k: usize, feature_size: usize) -> Result<PcaMap> {
    let layer = backbone.num_layers();
    let f = backbone.image_features(image, feature_size, &[layer])?;
    let s = key_self_similarity(&f.keys(layer)?.squeeze(0)?)?;
    selfsim_pca(&s, f.grid, k)
}

/// Writes `component_{c}.png` (grayscale at patch-grid resolution), raw maps and a manifest.
pub fn write_pca(pca: &PcaMap, image: &ImageTensor, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (gh, gw) = pca.grid;
    let mut entries = Vec::new();
    for c in 0..pca.k {
        let map = pca.component(c);
        let img = ImageTensor::from_fn(gh, gw, |_, y, x| map[y * gw + x] as f32);
        img.save(dir.join(format!("component_{c}.png")))?;
        let file = format!("component_{c}.f32");
        let t = Tensor::from_vec(map.iter().map(|v| *v as f32).collect::<Vec<_>>(), (gh, gw), &candle_core::Device::Cpu)?;
        let shape = write_raw(&dir.join(&file), &t)?;
        entries.push(DumpEntry {
            file,
            shape,
            dtype: "f32le",
        });
    }
    #[derive(Serialize)]
    struct PcaManifest<'a> {
        image_hash: String,
        grid: (usize, usize),
        explained: &'a [f64],
        degenerate: bool,
        entries: Vec<DumpEntry>,
    }
    let m = PcaManifest {
        image_hash: image.content_hash(),
        grid: pca.grid,
        explained: &pca.explained,
        degenerate: pca.degenerate,
        entries,
    };
    let p = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&p, text).map_err(|e| Error::io(p, e))
}
