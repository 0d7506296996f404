use std::collections::HashMap;

use spoofnet::augment::GriffinLimConfig;
use spoofnet::branch::{BranchConfig, SplitMode};
use spoofnet::encoder::EncoderConfig;
use spoofnet::evaluation::{eer_of, score_manifest};
use spoofnet::frontend::{FeaturePipeline, MelConfig};
use spoofnet::fusion::{FusionConfig, FusionMode};
use spoofnet::harness::{generate_synthetic_dataset, Manifest, SynthConfig};
use spoofnet::model::{Detector, InputNorm, ModelConfig};

fn setup(dir: &std::path::Path) -> (Detector, Manifest, MelConfig) {
    let mel = MelConfig { n_mels: 32, ..MelConfig::default() };
    let synth = SynthConfig { duration: 0.5, mel: mel.clone(), gl: GriffinLimConfig { iterations: 4, ..Default::default() }, ..Default::default() };
    let manifest = generate_synthetic_dataset(4, &synth, 9, dir).unwrap();
    let cfg = ModelConfig {
        input_norm: InputNorm::default(),
        encoder: EncoderConfig { depth: 2, dim: 8, heads: 2, mlp_ratio: 2.0, patch_size: 16, n_mels: 32, frames: 48 },
        fusion: FusionConfig { mode: FusionMode::SeGate, k: 2, se_reduction: 2, cnn_channels: [2, 2, 2] },
        split: SplitMode::Channel,
        branch: BranchConfig { dim: 4, layers: 1 },
    };
    (Detector::new(&cfg, 1).unwrap(), manifest, mel)
}

#[test]
fn scores_ignore_row_order_and_thread_scheduling() {
    let dir = tempfile::tempdir().unwrap();
    let (model, manifest, mel) = setup(dir.path());
    let features = FeaturePipeline::new(&mel, 0.5, None).unwrap();
    let a = score_manifest(&model, &manifest, &features).unwrap();
    let b = score_manifest(&model, &manifest, &features).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().map(|t| t.utt_id.as_str()).collect::<Vec<_>>(), manifest.rows().iter().map(|r| r.utt_id.as_str()).collect::<Vec<_>>());

    let reversed = Manifest::new(manifest.rows().iter().rev().cloned().collect()).unwrap();
    let c: HashMap<_, _> = score_manifest(&model, &reversed, &features).unwrap().into_iter().map(|t| (t.utt_id, t.score)).collect();
    for t in &a {
        assert_eq!(c[&t.utt_id], t.score);
    }
    let eer = eer_of(&a).unwrap().eer;
    assert!((0.0..=1.0).contains(&eer));
}

#[test]
fn cached_features_score_like_fresh_ones() {
    let dir = tempfile::tempdir().unwrap();
    let (model, manifest, mel) = setup(dir.path());
    let cache = dir.path().join("cache");
    let cached = FeaturePipeline::new(&mel, 0.5, Some(cache.clone())).unwrap();
    let first = score_manifest(&model, &manifest, &cached).unwrap();
    assert_eq!(std::fs::read_dir(&cache).unwrap().count(), manifest.len());
    let second = score_manifest(&model, &manifest, &cached).unwrap();
    assert_eq!(first, second);
    let fresh = score_manifest(&model, &manifest, &FeaturePipeline::new(&mel, 0.5, None).unwrap()).unwrap();
    for (f, c) in fresh.iter().zip(&first) {
        assert!((f.score - c.score).abs() < 1e-3, "{} vs {}", f.score, c.score);
    }
}
