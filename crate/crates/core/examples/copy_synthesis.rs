//! Griffin-Lim copy synthesis of a synthetic clip: prints the spectral
//! distance per iteration and writes the original and resynthesized audio.
//!
//! cargo run --example copy_synthesis [out_dir] [iterations]

use std::path::PathBuf;

use spoofnet::augment::{copy_synthesis, GriffinLim, GriffinLimConfig};
use spoofnet::frontend::{write_waveform, MelConfig, MelFrontend};
use spoofnet::harness::synth_bonafide;

fn main() -> spoofnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "copy_synthesis_out".into()));
    let iterations = args.next().map_or(32, |s| s.parse().expect("iterations must be an integer"));
    std::fs::create_dir_all(&out).map_err(|source| spoofnet::Error::Io { path: out.clone(), source })?;

    let cfg = MelConfig::default();
    let w = synth_bonafide(32_000, cfg.sample_rate, 7)?;
    let gl = GriffinLim::new(GriffinLimConfig { iterations, ..Default::default() })?;
    let trace = gl.run(&MelFrontend::new(&cfg)?.compute(&w)?, 0)?;
    for (i, d) in trace.distances.iter().enumerate() {
        if i < 5 || i + 1 == trace.distances.len() {
            println!("iteration {:3}: distance {d:.4}", i + 1);
        }
    }
    let fake = copy_synthesis(&w, &gl, &cfg, 0)?;
    write_waveform(&out.join("original.wav"), &w)?;
    write_waveform(&out.join("griffin_lim.wav"), &fake)?;
    println!("wrote {}/original.wav and griffin_lim.wav", out.display());
    Ok(())
}
