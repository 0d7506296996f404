//! Desk-scale experiment: synthetic data, training with the channel split
//! and SE gate, then EER on a held-out synthetic set.
//!
//! cargo run --release --example train_desk [epochs] [seed]

use spoofnet::branch::SplitMode;
use spoofnet::encoder::EncoderConfig;
use spoofnet::evaluation::{eer_report, score_manifest};
use spoofnet::frontend::{FeaturePipeline, MelConfig};
use spoofnet::fusion::{FusionConfig, FusionMode};
use spoofnet::harness::{generate_synthetic_dataset, SynthConfig};
use spoofnet::model::{Detector, InputNorm, ModelConfig};
use spoofnet::training::{train, TrainConfig};

fn main() -> spoofnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(40, |s| s.parse().expect("epochs must be an integer"));
    let seed = args.next().map_or(1, |s| s.parse().expect("seed must be an integer"));
    let dir = std::env::temp_dir().join(format!("spoofnet_desk_{seed}"));

    let synth = SynthConfig::default();
    let train_set = generate_synthetic_dataset(8, &synth, seed, &dir.join("train"))?;
    let held = SynthConfig { id_prefix: "held_".into(), ..synth };
    let held_set = generate_synthetic_dataset(4, &held, seed + 1000, &dir.join("held"))?;

    let features = FeaturePipeline::new(&MelConfig::default(), 4.0, None)?;
    let data = train_set
        .rows()
        .iter()
        .map(|r| Ok((features.features(&r.utt_id, &r.path)?, r.label)))
        .collect::<spoofnet::Result<Vec<_>>>()?;
    let cfg = ModelConfig {
        input_norm: InputNorm::default(),
        encoder: EncoderConfig::desk(128, features.frames()),
        fusion: FusionConfig { mode: FusionMode::SeGate, k: 4, ..FusionConfig::default() },
        split: SplitMode::Channel,
        branch: Default::default(),
    };
    let mut model = Detector::new(&cfg, seed)?;
    let tc = TrainConfig { epochs, batch_size: 4, lr: 5e-4, seed, spec_augment: None, ..TrainConfig::desk() };
    let outcome = train(&mut model, &data, &[], &tc, Some(&dir.join("run")))?;
    println!("epoch\tloss\tacc\tseconds");
    for h in &outcome.history {
        println!("{}", h.log_line());
    }
    let scores = score_manifest(&model, &held_set, &features)?;
    let eer = spoofnet::evaluation::eer_of(&scores)?;
    println!("held-out {}", eer_report(eer.eer));
    println!("outputs in {}", dir.display());
    Ok(())
}
