//! Shapes flowing through each split mode, and a check that the
//! frequency-split branches do not see each other's half.

use spoofnet::branch::{split_frequency, SplitMode};
use spoofnet::encoder::EncoderConfig;
use spoofnet::frontend::{MelConfig, MelFrontend};
use spoofnet::fusion::{FusionConfig, FusionMode};
use spoofnet::harness::synth_bonafide;
use spoofnet::model::{Detector, InputNorm, ModelConfig};
use spoofnet::nn::Graph;

fn main() -> spoofnet::Result<()> {
    let mel_cfg = MelConfig::default();
    let mel = MelFrontend::new(&mel_cfg)?.compute(&synth_bonafide(64_000, mel_cfg.sample_rate, 2)?)?;
    for split in SplitMode::ALL {
        let cfg = ModelConfig {
            input_norm: InputNorm::default(),
            encoder: EncoderConfig::desk(mel.n_mels(), mel.frames()),
            fusion: FusionConfig { mode: FusionMode::SeGate, ..FusionConfig::default() },
            split,
            branch: Default::default(),
        };
        let model = Detector::new(&cfg, 0)?;
        let t = model.trace(&mel)?;
        println!("{:9} branch inputs {:?} -> embeddings {:?}, score {:+.4}", split.as_str(), t.branch_inputs, t.embedding_dims, t.logits.real - t.logits.fake);
        if split == SplitMode::Frequency {
            let mut g = Graph::new(model.params());
            let vars = model.forward(&mut g, &mel)?;
            let fused = spoofnet::encoder::TokenGrid::new(g.value(vars.fused).clone(), t.grid)?;
            let (low, high) = split_frequency(&fused)?;
            println!("          low half {:?}, high half {:?}", low.shape(), high.shape());
        }
    }
    Ok(())
}
