//! Post-hoc transfer metrics built from the loss terms.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::descriptors::key_self_similarity;
use crate::error::{Error, Result};
use crate::exec::ExecPolicy;
use crate::image::ImageTensor;
use crate::losses::{appearance_loss, structure_loss};
use crate::vit::Backbone;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub app_distance_out_vs_target: f64,
    pub app_distance_src_vs_target: f64,
    pub struct_distance_out_vs_src: f64,
    pub struct_distance_target_vs_src: f64,
}

impl TransferReport {
    /// Appearance moved toward the target and structure stayed closer to the source than the target is.
    pub fn is_successful(&self) -> bool {
        self.app_distance_out_vs_target < self.app_distance_src_vs_target
            && self.struct_distance_out_vs_src < self.struct_distance_target_vs_src
    }

    pub fn to_text(&self) -> String {
        format!(
            "app_distance_out_vs_target = {:.9e}\napp_distance_src_vs_target = {:.9e}\n\
             struct_distance_out_vs_src = {:.9e}\nstruct_distance_target_vs_src = {:.9e}\n",
            self.app_distance_out_vs_target,
            self.app_distance_src_vs_target,
            self.struct_distance_out_vs_src,
            self.struct_distance_target_vs_src
        )
    }
}

/// [CLS] and key self-similarity of one image at the deepest layer.
#[derive(Debug, Clone)]
pub struct Descriptors {
    pub cls: Tensor,
    pub selfsim: Tensor,
}

pub fn descriptors(backbone: &Backbone, image: &ImageTensor, feature_size: usize) -> Result<Descriptors> {
    let layer = backbone.num_layers();
    let f = backbone.image_features(image, feature_size, &[layer])?;
    Ok(Descriptors {
        cls: f.cls(layer)?.squeeze(0)?,
        selfsim: key_self_similarity(&f.keys(layer)?.squeeze(0)?)?,
    })
}

fn value(t: Tensor) -> Result<f64> {
    let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::NonFinite {
            component: "metric".into(),
            iteration: 0,
            diagnostic: None,
        });
    }
    Ok(v)
}

fn match_size(image: &ImageTensor, height: usize, width: usize) -> Result<ImageTensor> {
    if (image.height(), image.width()) == (height, width) {
        Ok(image.clone())
    } else {
        image.resize(height, width, ExecPolicy::default())
    }
}

/// The four transfer distances, with `target` and `output` first resized to the
/// source size so all self-similarity matrices share one patch grid.
pub fn evaluate_transfer(
    backbone: &Backbone,
    source: &ImageTensor,
    target: &ImageTensor,
    output: &ImageTensor,
    feature_size: usize,
) -> Result<TransferReport> {
    let (h, w) = (source.height(), source.width());
    let ds = descriptors(backbone, source, feature_size)?;
    let dt = descriptors(backbone, &match_size(target, h, w)?, feature_size)?;
    let d_o = descriptors(backbone, &match_size(output, h, w)?, feature_size)?;
    Ok(TransferReport {
        app_distance_out_vs_target: value(appearance_loss(&dt.cls, &d_o.cls)?)?,
        app_distance_src_vs_target: value(appearance_loss(&dt.cls, &ds.cls)?)?,
        struct_distance_out_vs_src: value(structure_loss(&ds.selfsim, &d_o.selfsim)?)?,
        struct_distance_target_vs_src: value(structure_loss(&ds.selfsim, &dt.selfsim)?)?,
    })
}
