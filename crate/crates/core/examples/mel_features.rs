//! Log-mel features of a synthetic clip, optionally written to a WAV first.
//!
//! cargo run --example mel_features [out.wav]

use spoofnet::frontend::{fix_duration, load_waveform, write_waveform, MelConfig, MelFrontend};
use spoofnet::harness::synth_bonafide;

fn main() -> spoofnet::Result<()> {
    let cfg = MelConfig::default();
    let mut w = synth_bonafide(64_000, cfg.sample_rate, 3)?;
    if let Some(path) = std::env::args().nth(1) {
        write_waveform(path.as_ref(), &w)?;
        w = load_waveform(path.as_ref())?;
        println!("round-tripped through {path}");
    }
    let w = fix_duration(&w, 4.0)?;
    let mel = MelFrontend::new(&cfg)?.compute(&w)?;
    println!("{} frames x {} mel bins, dominant bin {}", mel.frames(), mel.n_mels(), mel.dominant_bin());
    let means = mel.mean_over_frames();
    for (bin, m) in means.iter().enumerate().step_by(16) {
        println!("bin {bin:3}  mean log-power {m:8.3}");
    }
    Ok(())
}
