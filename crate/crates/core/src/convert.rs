//! Conversion of PyTorch ViT checkpoints into the named-tensor archive.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::archive::{meta, ArchiveTensor, WeightArchive};
use crate::error::{Error, Result};
use crate::vit::{BackboneConfig, IMAGENET_MEAN, IMAGENET_STD};

/// Wrapper prefixes stripped from checkpoint keys.
const PREFIXES: [&str; 2] = ["module.", "backbone."];
/// Keys that belong to training heads rather than the backbone.
const IGNORED: [&str; 1] = ["head."];
/// Nested state-dict entries tried when the top level holds no tensors.
const NESTED: [&str; 4] = ["teacher", "state_dict", "model", "student"];

/// Reads a `.pth` (zip pickle) or `.safetensors` file into name → tensor.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    if path.extension().is_some_and(|e| e == "safetensors") {
        let a = WeightArchive::read(path)?;
        return a
            .names()
            .map(|n| Ok((n.to_string(), a.get(n).expect("listed").to_tensor(&candle_core::Device::Cpu, DType::F32)?)))
            .collect();
    }
    let bad = |e: candle_core::Error| Error::Archive(format!("{}: cannot parse checkpoint: {e}", path.display()));
    let top = candle_core::pickle::read_all(path).map_err(bad)?;
    if !top.is_empty() {
        return Ok(top);
    }
    for key in NESTED {
        if let Ok(v) = candle_core::pickle::read_all_with_key(path, Some(key)) {
            if !v.is_empty() {
                return Ok(v);
            }
        }
    }
    Err(Error::Archive(format!("{}: no tensors found", path.display())))
}

fn strip(name: &str) -> &str {
    let mut n = name;
    loop {
        match PREFIXES.iter().find(|p| n.starts_with(*p)) {
            Some(p) => n = &n[p.len()..],
            None => return n,
        }
    }
}

/// Infers the backbone geometry from tensor shapes; heads default to `d / 64`.
pub fn infer_config(tensors: &BTreeMap<String, Tensor>) -> Result<BackboneConfig> {
    let dims = |name: &str| -> Result<Vec<usize>> {
        Ok(tensors
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?
            .dims()
            .to_vec())
    };
    let patch = dims("patch_embed.proj.weight")?;
    if patch.len() != 4 {
        return Err(Error::ShapeMismatch {
            path: "patch_embed.proj.weight".into(),
            expected: vec![0, 3, 0, 0],
            actual: patch,
        });
    }
    let d = patch[0];
    let pos = dims("pos_embed")?;
    let tokens = pos.get(1).copied().unwrap_or(0);
    let grid = ((tokens.saturating_sub(1)) as f64).sqrt().round() as usize;
    let num_layers = tensors
        .keys()
        .filter_map(|k| k.strip_prefix("blocks.")?.split('.').next()?.parse::<usize>().ok())
        .max()
        .map_or(0, |m| m + 1);
    let mlp_hidden = dims("blocks.0.mlp.fc1.weight")?[0];
    let cfg = BackboneConfig {
        patch_size: patch[2],
        num_layers,
        embed_dim: d,
        num_heads: (d / 64).max(1),
        mlp_hidden,
        layer_norm_eps: 1e-6,
        image_mean: IMAGENET_MEAN,
        image_std: IMAGENET_STD,
        native_grid: grid,
        interpolate_pos: true,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Builds a backbone archive from raw checkpoint tensors.
///
/// Every expected tensor must be present with the expected shape, and every
/// non-head checkpoint tensor must be consumed; otherwise the unmatched names
/// are reported (`missing:` for expected names, `unexpected:` for extras).
pub fn convert_tensors(raw: Vec<(String, Tensor)>, num_heads: Option<usize>) -> Result<WeightArchive> {
    let mut tensors = BTreeMap::new();
    for (name, t) in raw {
        let n = strip(&name);
        if IGNORED.iter().any(|p| n.starts_with(p)) {
            log::info!("ignoring head tensor {name}");
            continue;
        }
        tensors.insert(n.to_string(), t);
    }
    let mut cfg = infer_config(&tensors).map_err(|e| match e {
        Error::MissingParameter(_) => Error::UnrecognizedCheckpoint(tensors.keys().cloned().collect()),
        other => other,
    })?;
    if let Some(h) = num_heads {
        cfg.num_heads = h;
        cfg.validate()?;
    }
    let expected = cfg.parameter_shapes();
    let mut unmatched: Vec<String> = expected
        .iter()
        .filter(|(n, _)| !tensors.contains_key(n))
        .map(|(n, _)| format!("missing:{n}"))
        .collect();
    let known: std::collections::BTreeSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
    unmatched.extend(
        tensors
            .keys()
            .filter(|k| !known.contains(k.as_str()))
            .map(|k| format!("unexpected:{k}")),
    );
    if !unmatched.is_empty() {
        return Err(Error::UnrecognizedCheckpoint(unmatched));
    }
    let mut archive = WeightArchive::new();
    for (name, shape) in expected {
        let t = &tensors[&name];
        if t.dims() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                path: name,
                expected: shape,
                actual: t.dims().to_vec(),
            });
        }
        archive.insert(name, ArchiveTensor::from_tensor(t)?);
    }
    cfg.write_metadata(&mut archive);
    Ok(archive)
}

/// Converts a checkpoint file; the archive records the source file name.
pub fn convert_checkpoint(path: impl AsRef<Path>, num_heads: Option<usize>) -> Result<WeightArchive> {
    let path = path.as_ref();
    let mut archive = convert_tensors(read_checkpoint(path)?, num_heads)?;
    if let Some(name) = path.file_name() {
        archive.set_meta(meta::SOURCE, name.to_string_lossy());
    }
    Ok(archive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::SyntheticBackbone;

    fn raw(prefix: &str) -> Vec<(String, Tensor)> {
        let a = SyntheticBackbone {
            patch_size: 4,
            num_layers: 2,
            embed_dim: 64,
            num_heads: 1,
            mlp_hidden: 32,
            native_grid: 2,
            seed: 1,
        }
        .build();
        a.names()
            .map(|n| {
                let t = a.get(n).unwrap().to_tensor(&candle_core::Device::Cpu, DType::F32).unwrap();
                (format!("{prefix}{n}"), t)
            })
            .collect()
    }

    #[test]
    fn converts_and_infers_geometry() {
        let a = convert_tensors(raw("module.backbone."), None).unwrap();
        let cfg = BackboneConfig::from_archive(&a).unwrap();
        assert_eq!((cfg.num_layers, cfg.embed_dim, cfg.num_heads, cfg.patch_size), (2, 64, 1, 4));
        assert_eq!(cfg.native_grid, 2);
    }

    #[test]
    fn conversion_is_deterministic() {
        let a = convert_tensors(raw(""), None).unwrap();
        let b = convert_tensors(raw(""), None).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }

    #[test]
    fn unmatched_keys_are_listed() {
        let mut r = raw("");
        r.retain(|(n, _)| n != "blocks.1.attn.qkv.bias");
        r.push(("blocks.0.attn.relative_bias".into(), Tensor::zeros(3, DType::F32, &candle_core::Device::Cpu).unwrap()));
        match convert_tensors(r, None) {
            Err(Error::UnrecognizedCheckpoint(keys)) => {
                assert!(keys.contains(&"missing:blocks.1.attn.qkv.bias".to_string()));
                assert!(keys.contains(&"unexpected:blocks.0.attn.relative_bias".to_string()));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn head_tensors_are_ignored() {
        let mut r = raw("");
        r.push(("head.last_layer.weight".into(), Tensor::zeros(3, DType::F32, &candle_core::Device::Cpu).unwrap()));
        assert!(convert_tensors(r, None).is_ok());
    }
}
