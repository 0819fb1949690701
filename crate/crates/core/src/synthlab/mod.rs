//! Synthetic moving-actor datasets, their file formats and the dataset-level
//! pipeline steps.

pub mod dataset;
pub mod formats;
pub mod kv;
pub mod manifest;
pub mod pipeline;
pub mod scene;

pub use dataset::{eligible_sequences, DatasetConfig, Direction};
pub use formats::{DetectionSet, FeatureFile, ModelFile, SequenceDetections, TubeSet};
pub use manifest::{Dataset, Manifest, Split, VideoEntry};
pub use scene::{generate_scene, ActorSpec, Scene, SceneConfig, SignatureMode, Stream};
