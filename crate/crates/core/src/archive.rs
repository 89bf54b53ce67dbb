//! Named-tensor weight container backed by the safetensors file format.
//!
//! Archives carry string metadata next to the tensors. Backbone archives use
//! the keys listed in [`meta`]; see the [`crate::vit`] module docs for the tensor
//! naming scheme.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Metadata keys written into backbone archives.
pub mod meta {
    pub const FORMAT: &str = "format";
    pub const PATCH_SIZE: &str = "patch_size";
    pub const EMBED_DIM: &str = "embed_dim";
    pub const NUM_HEADS: &str = "num_heads";
    pub const NUM_LAYERS: &str = "num_layers";
    pub const MLP_HIDDEN: &str = "mlp_hidden";
    pub const LAYER_NORM_EPS: &str = "layer_norm_eps";
    pub const IMAGE_MEAN: &str = "image_mean";
    pub const IMAGE_STD: &str = "image_std";
    pub const SOURCE: &str = "source";

    pub const BACKBONE_FORMAT: &str = "vitsplice.vit.v1";
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ArchiveTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Archive(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, self.shape.as_slice(), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Self {
            shape: t.dims().to_vec(),
            data,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightArchive {
    tensors: BTreeMap<String, ArchiveTensor>,
    metadata: BTreeMap<String, String>,
}

impl WeightArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArchiveTensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn remove(&mut self, name: &str) -> Option<ArchiveTensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveTensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::Archive(format!("missing metadata key `{key}`")))?;
        raw.trim()
            .parse()
            .map_err(|_| Error::Archive(format!("metadata `{key}` = `{raw}` is not valid")))
    }

    /// Comma-separated list of floats, e.g. normalization statistics.
    pub fn meta_floats(&self, key: &str) -> Result<Vec<f32>> {
        let raw = self
            .meta(key)
            .ok_or_else(|| Error::Archive(format!("missing metadata key `{key}`")))?;
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Archive(format!("metadata `{key}` = `{raw}` is not valid")))
            })
            .collect()
    }

    /// SHA-256 over every tensor in name order (name, shape, little-endian data).
    pub fn checksum(&self) -> String {
        checksum_entries(self.tensors.iter().map(|(k, v)| (k.as_str(), v.shape.as_slice(), v.data.as_slice())))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let b = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
                (k.clone(), b, v.shape.clone())
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(k, b, s)| {
                TensorView::new(Dtype::F32, s.clone(), b)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Archive(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta: std::collections::HashMap<String, String> =
            self.metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Archive(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Archive(e.to_string()))?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Archive(e.to_string()))?;
        let mut archive = WeightArchive::new();
        if let Some(m) = header.metadata() {
            for (k, v) in m {
                archive.set_meta(k.clone(), v.clone());
            }
        }
        for (name, view) in st.tensors() {
            let data = decode_view(&name, &view)?;
            archive.insert(name, ArchiveTensor::new(view.shape().to_vec(), data)?);
        }
        Ok(archive)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Archive(msg) => Error::Archive(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

fn decode_view(name: &str, view: &TensorView<'_>) -> Result<Vec<f32>> {
    let raw = view.data();
    let out = match view.dtype() {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")) as f32)
            .collect(),
        other => {
            return Err(Error::Archive(format!(
                "tensor `{name}` has unsupported dtype {other:?}"
            )))
        }
    };
    Ok(out)
}

pub(crate) fn checksum_entries<'a>(
    entries: impl Iterator<Item = (&'a str, &'a [usize], &'a [f32])>,
) -> String {
    let mut h = Sha256::new();
    for (name, shape, data) in entries {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((shape.len() as u64).to_le_bytes());
        for d in shape {
            h.update((*d as u64).to_le_bytes());
        }
        for v in data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Stateless splitmix64 stream used for reproducible synthetic weights.
#[derive(Debug, Clone)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[-1, 1)`.
    pub fn next_signed(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    }
}

/// Fills a tensor with zero-mean uniform values of the given standard deviation.
pub(crate) fn synthetic_tensor(seed: u64, name: &str, shape: &[usize], std: f64, offset: f64) -> ArchiveTensor {
    let mut name_hash = 0xcbf2_9ce4_8422_2325u64;
    for b in name.bytes() {
        name_hash = (name_hash ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = SplitMix64::new(seed ^ name_hash);
    let half_width = std * 3f64.sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (offset + half_width * rng.next_signed()) as f32)
        .collect();
    ArchiveTensor {
        shape: shape.to_vec(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> WeightArchive {
        let mut a = WeightArchive::new();
        a.insert("b", ArchiveTensor::new(vec![2, 3], (0..6).map(|x| x as f32).collect()).unwrap());
        a.insert("a", ArchiveTensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.25]).unwrap());
        a.set_meta(meta::PATCH_SIZE, "8");
        a.set_meta(meta::IMAGE_MEAN, "0.485, 0.456,0.406");
        a
    }

    #[test]
    fn bytes_round_trip_preserves_everything() {
        let a = sample();
        let b = WeightArchive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(b.meta_parsed::<usize>(meta::PATCH_SIZE).unwrap(), 8);
        assert_eq!(b.meta_floats(meta::IMAGE_MEAN).unwrap(), vec![0.485, 0.456, 0.406]);
    }

    #[test]
    fn checksum_sees_single_value_changes() {
        let a = sample();
        let mut b = a.clone();
        b.tensors.get_mut("a").unwrap().data[2] = 2.0000002;
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn truncated_bytes_fail_to_parse() {
        let bytes = sample().to_bytes().unwrap();
        let err = WeightArchive::from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::Archive(_)));
    }

    #[test]
    fn shape_data_mismatch_is_rejected() {
        assert!(ArchiveTensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn synthetic_values_are_reproducible_and_scaled() {
        let a = synthetic_tensor(7, "w", &[100, 100], 0.5, 0.0);
        let b = synthetic_tensor(7, "w", &[100, 100], 0.5, 0.0);
        let c = synthetic_tensor(7, "v", &[100, 100], 0.5, 0.0);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let n = a.data.len() as f64;
        let mean = a.data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = a.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02);
        assert!((var.sqrt() - 0.5).abs() < 0.02);
    }
}
