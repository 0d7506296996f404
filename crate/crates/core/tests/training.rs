use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spoofnet::branch::{BranchConfig, SplitMode};
use spoofnet::encoder::EncoderConfig;
use spoofnet::frontend::{MelConfig, MelSpec};
use spoofnet::fusion::{FusionConfig, FusionMode};
use spoofnet::model::{Detector, InputNorm, ModelConfig};
use spoofnet::nn::Gradients;
use spoofnet::training::{evaluate, train, ClassWeights, Example, TrainConfig};
use spoofnet::{Error, Label};

fn small_config(mode: FusionMode, split: SplitMode) -> ModelConfig {
    ModelConfig {
        input_norm: InputNorm::default(),
        encoder: EncoderConfig { depth: 3, dim: 8, heads: 2, mlp_ratio: 2.0, patch_size: 16, n_mels: 32, frames: 48 },
        fusion: FusionConfig { mode, k: 2, se_reduction: 2, cnn_channels: [2, 2, 2] },
        split,
        branch: BranchConfig { dim: 4, layers: 1 },
    }
}

fn random_mel(rng: &mut ChaCha8Rng, offset: f64) -> MelSpec {
    let cfg = MelConfig { n_mels: 32, ..MelConfig::default() };
    MelSpec::new(48, 32, (0..48 * 32).map(|_| rng.gen_range(-20.0..0.0) + offset).collect(), cfg).unwrap()
}

fn toy_data(seed: u64, n: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Bonafide } else { Label::Spoof };
            (random_mel(&mut rng, if label == Label::Bonafide { 2.0 } else { 0.0 }), label)
        })
        .collect()
}

fn quiet(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig { epochs, lr, batch_size: 4, spec_augment: None, checkpoint_every: 0, ..TrainConfig::desk() }
}

#[test]
fn every_parameter_group_receives_gradient() {
    let data = toy_data(1, 4);
    for mode in FusionMode::ALL {
        for split in SplitMode::ALL {
            let model = Detector::new(&small_config(mode, split), 3).unwrap();
            let mut total = Gradients::empty(model.params().len());
            for (mel, label) in &data {
                let (_, _, g) = model.loss_and_gradients(mel, *label, &ClassWeights::default(), 0.25).unwrap();
                total.merge(&g);
            }
            let branches: &[&str] = if split == SplitMode::None { &["branch0."] } else { &["branch0.", "branch1."] };
            for group in ["encoder.", "fusion.", "head."].iter().chain(branches) {
                let norm = total.group_norm(model.params(), group);
                assert!(norm > 0.0 && norm.is_finite(), "{mode:?}/{split:?}: {group} gradient norm {norm}");
            }
        }
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let data = toy_data(2, 8);
    let mut model = Detector::new(&small_config(FusionMode::SeGate, SplitMode::Channel), 4).unwrap();
    let before = model.params().clone();
    let outcome = train(&mut model, &data, &[], &quiet(3, 0.0), None).unwrap();
    for id in before.ids() {
        assert_eq!(before.get(id).data(), model.params().get(id).data(), "{}", before.name(id));
    }
    let losses: Vec<f64> = outcome.history.iter().map(|h| h.loss).collect();
    assert!(losses.windows(2).all(|w| w[0] == w[1]), "{losses:?}");
}

#[test]
fn one_small_step_lowers_the_batch_loss() {
    let data = toy_data(3, 4);
    for mode in FusionMode::ALL {
        let mut model = Detector::new(&small_config(mode, SplitMode::Frequency), 5).unwrap();
        let cw = ClassWeights::default();
        let before = evaluate(&model, &data, &cw).unwrap().loss;
        let outcome = train(&mut model, &data, &[], &quiet(1, 1e-5), None).unwrap();
        assert_eq!(outcome.steps, 1);
        let after = evaluate(&model, &data, &cw).unwrap().loss;
        assert!(after < before, "{mode:?}: {before} -> {after}");
    }
}

#[test]
fn same_seed_same_run() {
    let data = toy_data(4, 6);
    let run = || {
        let mut model = Detector::new(&small_config(FusionMode::CnnGate, SplitMode::Channel), 6).unwrap();
        let cfg = TrainConfig { spec_augment: Some(Default::default()), ..quiet(2, 1e-3) };
        let outcome = train(&mut model, &data, &data, &cfg, None).unwrap();
        let losses: Vec<f64> = outcome.history.iter().map(|h| h.loss).collect();
        (losses, model.logits(&data[0].0).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn training_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy_data(5, 4);
    let mut model = Detector::new(&small_config(FusionMode::Concat, SplitMode::None), 7).unwrap();
    let cfg = TrainConfig { checkpoint_every: 1, ..quiet(2, 1e-3) };
    let outcome = train(&mut model, &data, &data, &cfg, Some(dir.path())).unwrap();
    assert_eq!(outcome.history.len(), 2);
    assert!(outcome.history.iter().all(|h| h.dev_eer.is_some()));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 2, "{metrics}");
    for f in ["epoch_001.ckpt", "epoch_002.ckpt", "final.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let reloaded = Detector::load(model.config(), &dir.path().join("final.ckpt")).unwrap();
    let (a, b) = (model.score(&data[1].0).unwrap(), reloaded.score(&data[1].0).unwrap());
    assert!((a - b).abs() < 1e-3, "{a} vs {b}");
}

#[test]
fn single_class_and_runaway_learning_rates_are_errors() {
    let mut data = toy_data(6, 4);
    data.retain(|e| e.1 == Label::Spoof);
    let mut model = Detector::new(&small_config(FusionMode::SeGate, SplitMode::Channel), 8).unwrap();
    assert!(matches!(train(&mut model, &data, &[], &quiet(1, 1e-3), None), Err(Error::InvalidInput(_))));
    assert!(train(&mut model, &[], &[], &quiet(1, 1e-3), None).is_err());
    let data = toy_data(6, 4);
    let r = train(&mut model, &data, &[], &quiet(3, 1e300), None);
    assert!(matches!(r, Err(Error::Diverged(_))), "{:?}", r.map(|o| o.history));
}
