//! Configuration, manifests, synthetic data and the command-line driver.

pub mod cli;
pub mod config;
pub mod manifest;
pub mod synth;

pub use config::{AugmentationSettings, ExperimentConfig, Preset, TrainSettings};
pub use manifest::{Manifest, ManifestRow};
pub use synth::{generate_synthetic_dataset, synth_bonafide, SynthConfig};
