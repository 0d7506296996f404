//! Self-contained toy datasets: bona fide clips are seeded mixtures of
//! sinusoids and band-limited noise, spoofs are their Griffin-Lim
//! copy-syntheses.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::augment::{copy_synthesis, utterance_seed, GriffinLim, GriffinLimConfig, Resynthesizer};
use crate::error::{Error, Result};
use crate::frontend::{write_waveform, MelConfig, Waveform};
use crate::harness::{Manifest, ManifestRow};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Clip length in seconds.
    pub duration: f64,
    pub mel: MelConfig,
    pub gl: GriffinLimConfig,
    /// Prepended to every utterance id.
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { duration: 4.0, mel: MelConfig::default(), gl: GriffinLimConfig::default(), id_prefix: String::new() }
    }
}

/// One bona fide clip: a slowly modulated harmonic series reaching into the
/// top octave plus a quiet band of low-frequency noise; peak amplitude 0.5.
pub fn synth_bonafide(n_samples: usize, sample_rate: u32, seed: u64) -> Result<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let nyq = sr / 2.0;
    let mut x = vec![0.0; n_samples];
    let f0 = rng.gen_range(0.04..0.09) * nyq;
    let top = rng.gen_range(0.8..0.95) * nyq;
    let mut f = f0;
    while f < top {
        let a = rng.gen_range(0.2..1.0);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        // Slow amplitude modulation keeps the clips from being perfectly stationary.
        let (mf, depth) = (rng.gen_range(0.2..3.0), rng.gen_range(0.0..0.5));
        for (i, v) in x.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let env = 1.0 - depth * (0.5 + 0.5 * (std::f64::consts::TAU * mf * t).sin());
            *v += a * env * (std::f64::consts::TAU * f * t + phase).sin();
        }
        f += f0;
    }
    let lo = rng.gen_range(0.01..0.1) * nyq;
    let hi = lo + rng.gen_range(0.05..0.2) * nyq;
    let level = rng.gen_range(0.05..0.3);
    let mut noise: Vec<Complex<f64>> = (0..n_samples).map(|_| Complex::new(rng.gen_range(-1.0..1.0), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n_samples).process(&mut noise);
    for (k, c) in noise.iter_mut().enumerate() {
        let f = k.min(n_samples - k) as f64 * sr / n_samples as f64;
        if f < lo || f > hi {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n_samples).process(&mut noise);
    let rms = (noise.iter().map(|c| c.re * c.re).sum::<f64>() / n_samples as f64).sqrt().max(1e-12);
    for (v, c) in x.iter_mut().zip(&noise) {
        *v += level * c.re / rms;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    x.iter_mut().for_each(|v| *v *= 0.5 / peak);
    Waveform::new(x, sample_rate)
}

/// Writes `n_bonafide` bona fide clips, one Griffin-Lim spoof of each (attack
/// tag `gl`) and `manifest.tsv` into `out_dir`. Manifest paths are relative
/// to `out_dir`; the returned manifest has them resolved.
pub fn generate_synthetic_dataset(n_bonafide: usize, cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n_bonafide < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 bona fide clips, got {n_bonafide}")));
    }
    cfg.mel.validate()?;
    let audio = out_dir.join("audio");
    std::fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
    let n = (cfg.duration * cfg.mel.sample_rate as f64).round() as usize;
    if n < cfg.mel.win_length() {
        return Err(Error::config(&["frontend.duration"], "clips would be shorter than one frame"));
    }
    let gl = GriffinLim::new(cfg.gl)?;
    let pairs = (0..n_bonafide)
        .into_par_iter()
        .map(|i| {
            let bona_id = format!("{}bona_{i:04}", cfg.id_prefix);
            let spoof_id = format!("{}spoof_{i:04}", cfg.id_prefix);
            let w = synth_bonafide(n, cfg.mel.sample_rate, utterance_seed(seed, &bona_id))?;
            let fake = copy_synthesis(&w, &gl, &cfg.mel, utterance_seed(seed, &spoof_id))
                .map_err(|e| e.for_utterance(&bona_id))?;
            let (bp, sp) = (format!("audio/{bona_id}.wav"), format!("audio/{spoof_id}.wav"));
            write_waveform(&out_dir.join(&bp), &w)?;
            write_waveform(&out_dir.join(&sp), &fake)?;
            Ok((ManifestRow::bonafide(bona_id, bp), ManifestRow::spoof(spoof_id, sp, gl.name())))
        })
        .collect::<Result<Vec<_>>>()?;
    let (bona, spoof): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let manifest = Manifest::new(bona.into_iter().chain(spoof).collect())?;
    let path = out_dir.join("manifest.tsv");
    manifest.write(&path)?;
    Manifest::read(&path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::load_waveform;
    use crate::label::Label;

    #[test]
    fn generates_both_classes_deterministically() {
        let cfg = SynthConfig { duration: 0.5, gl: GriffinLimConfig { iterations: 4, ..Default::default() }, ..Default::default() };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_synthetic_dataset(3, &cfg, 11, a.path()).unwrap();
        let mb = generate_synthetic_dataset(3, &cfg, 11, b.path()).unwrap();
        assert_eq!((ma.count(Label::Bonafide), ma.count(Label::Spoof)), (3, 3));
        assert_eq!(std::fs::read(a.path().join("manifest.tsv")).unwrap(), std::fs::read(b.path().join("manifest.tsv")).unwrap());
        for (ra, rb) in ma.rows().iter().zip(mb.rows()) {
            assert_eq!(std::fs::read(&ra.path).unwrap(), std::fs::read(&rb.path).unwrap());
            let w = load_waveform(&ra.path).unwrap();
            assert_eq!(w.len(), 8000);
            assert!(w.samples().iter().all(|v| v.abs() <= 0.5 + 1e-6) || ra.label == Label::Spoof);
        }
        assert!(generate_synthetic_dataset(1, &cfg, 0, a.path()).is_err());
    }
}
