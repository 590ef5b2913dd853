//! Dataset plumbing: JSONL manifests, a synthetic multi-camera generator,
//! scoring and reports.

mod manifest;
mod score;
mod surrogate;
mod synth;

pub use manifest::{Manifest, ManifestRow};
pub use score::{
    report, score, weighted_score, Prediction, ScoreReport, MANIPULATED_WEIGHT, UNALTERED_WEIGHT,
};
pub use surrogate::{CameraSurrogate, ManipulationSurrogate, SurrogateOutcome};
pub use synth::{
    demosaic, generate_synthetic_dataset, mosaic, random_scene, CfaPattern, DemosaicKind,
    SyntheticCameraSpec,
};
