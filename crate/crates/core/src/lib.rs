//! Semantic appearance transfer with a frozen self-supervised ViT.
//!
//! A U-Net generator is trained on a single structure/appearance image pair.
//! Structure is described by the self-similarity of deepest-layer keys,
//! appearance by the deepest [CLS] token. Feature inversion, PCA of the key
//! self-similarity and raw feature dumps are provided for inspection.

pub mod archive;
pub mod augmentation;
pub mod config;
pub mod convert;
pub mod descriptors;
pub mod dump;
pub mod error;
pub mod exec;
pub mod generator;
pub mod gradcheck;
pub mod image;
pub mod inversion;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod trainer;
pub mod vit;

pub use error::{Error, ErrorKind, Result};
pub use exec::ExecPolicy;
pub use image::ImageTensor;
pub use vit::{Backbone, BackboneConfig, SyntheticBackbone};
