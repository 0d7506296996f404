//! Encodes one clip with the desk encoder and compares the three ways of
//! fusing its last k layers.
//!
//! cargo run --example layer_fusion [k]

use spoofnet::branch::SplitMode;
use spoofnet::encoder::EncoderConfig;
use spoofnet::frontend::{MelConfig, MelFrontend};
use spoofnet::fusion::{FusionConfig, FusionMode};
use spoofnet::harness::synth_bonafide;
use spoofnet::model::{Detector, InputNorm, ModelConfig};

fn main() -> spoofnet::Result<()> {
    let k: usize = std::env::args().nth(1).map_or(4, |s| s.parse().expect("k must be an integer"));
    let mel_cfg = MelConfig::default();
    let mel = MelFrontend::new(&mel_cfg)?.compute(&synth_bonafide(64_000, mel_cfg.sample_rate, 1)?)?;
    for mode in FusionMode::ALL {
        let cfg = ModelConfig {
            input_norm: InputNorm::default(),
            encoder: EncoderConfig::desk(mel.n_mels(), mel.frames()),
            fusion: FusionConfig { mode, k, ..FusionConfig::default() },
            split: SplitMode::Channel,
            branch: Default::default(),
        };
        let t = Detector::new(&cfg, 0)?.trace(&mel)?;
        let weights = t
            .fusion_weights
            .map(|w| w.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" "))
            .unwrap_or_else(|| "(learned projection)".into());
        println!("{:8} fused {:?} from layers {}..={}: {weights}", mode.as_str(), t.fused_shape, t.layer_count - k + 1, t.layer_count);
    }
    Ok(())
}
