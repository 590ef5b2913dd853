//! Source camera-model identification and post-processing detection.
//!
//! The crate covers the whole pipeline: quality-scored patch selection,
//! bidimensional EMD augmentation, JPEG/resize/gamma/rotation transforms,
//! a from-scratch reverse-mode autodiff core, DenseNet feature extraction,
//! multi-scale squeeze-and-excitation fusion, training, and weighted
//! forensic scoring.

pub mod augment;
pub mod cli;
pub mod densenet;
pub mod emd2d;
pub mod error;
pub mod fusionhead;
pub mod image;
pub mod jpeg;
pub mod netcore;
pub mod patchqual;
pub mod pipeline;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};
pub use image::{ChannelStats, Manipulation, PatchRef, RasterImage, Region};
